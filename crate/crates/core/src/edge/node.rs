use std::collections::{BTreeMap, VecDeque};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::battery::{Battery, BatteryModel};
use super::generators::{sample, street_image, Environment, SampleAt};
use super::mobility::Mobility;
use crate::analytics::GeoPoint;
use crate::command::{clamp_frequency, SensorSpec};
use crate::controller::Channel;
use crate::wire::{
    self, CommandMsg, CommandType, ImageDataMsg, KeepAliveMsg, Message, SensorDataMsg, SensorPayload, SensorRecord,
    SensorSession, SessionMap,
};

/// Sessions recorded longer than this are flagged in reports.
pub const LONG_SESSION_MS: i64 = 10 * 60 * 1000;

/// Upper bound on records in one sensor-data message.
pub const CHUNK_RECORDS: usize = 20_000;

pub const BACKOFF_BASE_MS: i64 = 1_000;
pub const BACKOFF_CAP_MS: i64 = 60_000;

/// Reconnect schedule: immediate first try, then doubling waits up to a cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    base_ms: i64,
    cap_ms: i64,
    wait_ms: i64,
    next_attempt_ms: i64,
}

impl Backoff {
    pub fn new(base_ms: i64, cap_ms: i64) -> Self {
        Backoff {
            base_ms,
            cap_ms,
            wait_ms: 0,
            next_attempt_ms: i64::MIN,
        }
    }

    pub fn ready(&self, now_ms: i64) -> bool {
        now_ms >= self.next_attempt_ms
    }

    /// Records a failed attempt and returns the time of the next one.
    pub fn failed(&mut self, now_ms: i64) -> i64 {
        self.wait_ms = if self.wait_ms == 0 {
            self.base_ms
        } else {
            (self.wait_ms * 2).min(self.cap_ms)
        };
        self.next_attempt_ms = now_ms + self.wait_ms;
        self.next_attempt_ms
    }

    pub fn reset(&mut self) {
        self.wait_ms = 0;
        self.next_attempt_ms = i64::MIN;
    }

    pub fn wait_ms(&self) -> i64 {
        self.wait_ms
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff::new(BACKOFF_BASE_MS, BACKOFF_CAP_MS)
    }
}

#[derive(Debug, Clone)]
pub struct EdgeNodeConfig {
    pub imei: String,
    /// Position in the fleet; picks the address block and RNG stream.
    pub index: u32,
    pub sensors: Vec<SensorSpec>,
    pub mobility: Mobility,
    pub battery: BatteryModel,
    pub keepalive_period_ms: i64,
    /// Keepalives are withheld inside these `[from, to)` offsets.
    pub keepalive_outages: Vec<(i64, i64)>,
    /// Step schedule of camera dirt level, `(offset_ms, level)`.
    pub dirt: Vec<(i64, f64)>,
    /// Scenario epoch; offsets above are relative to it.
    pub start_ms: i64,
}

impl EdgeNodeConfig {
    pub fn new(imei: &str, index: u32, sensors: Vec<SensorSpec>, mobility: Mobility, start_ms: i64) -> Self {
        EdgeNodeConfig {
            imei: imei.into(),
            index,
            sensors,
            mobility,
            battery: BatteryModel::default(),
            keepalive_period_ms: 10_000,
            keepalive_outages: Vec::new(),
            dirt: Vec::new(),
            start_ms,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.imei.is_empty() {
            return Err("imei must not be empty".into());
        }
        if self.keepalive_period_ms <= 0 {
            return Err(format!("{}: keepalive period must be > 0", self.imei));
        }
        self.battery.validate().map_err(|e| format!("{}: {e}", self.imei))?;
        self.mobility.validate().map_err(|e| format!("{}: {e}", self.imei))
    }
}

/// Per-node counters, measured on encoded frames handed to the transport.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EdgeCounters {
    pub keepalives_tx: u64,
    pub sensor_data_tx: u64,
    pub image_data_tx: u64,
    pub bytes_tx: u64,
    pub keepalive_bytes_tx: u64,
    pub data_bytes_tx: u64,
    pub image_bytes_tx: u64,
    pub bytes_rx: u64,
    pub commands_rx: BTreeMap<CommandType, u64>,
    pub ignored_commands: u64,
    pub samples_generated: u64,
    /// Records in frames handed to the transport.
    pub samples_transmitted: u64,
    /// Per sensor: records generated and their total JSON size.
    pub record_bytes: BTreeMap<String, (u64, u64)>,
    pub sessions: u64,
    pub long_sessions: u64,
    pub connects: u64,
    pub connect_failures: u64,
    pub churns: u64,
}

#[derive(Debug, Clone)]
struct ActiveSensor {
    name: String,
    frequency: f64,
    next_n: u64,
    records: Vec<SensorRecord>,
}

#[derive(Debug, Clone)]
struct Recording {
    started_ms: i64,
    sensors: Vec<ActiveSensor>,
}

/// A framed message ready for the transport.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub channel: Channel,
    pub bytes: Vec<u8>,
}

/// One simulated device. Transport-agnostic: callers move frames between
/// [`EdgeNode::take_frames`] and the controller and feed commands back via
/// [`EdgeNode::receive`].
#[derive(Debug)]
pub struct EdgeNode {
    cfg: EdgeNodeConfig,
    env: Environment,
    rng: ChaCha8Rng,
    battery: Battery,
    recording: Option<Recording>,
    stopped: Vec<SensorSession>,
    outbox: VecDeque<Message>,
    connected: bool,
    backoff: Backoff,
    last_keepalive_ms: i64,
    last_step_ms: i64,
    counters: EdgeCounters,
}

impl EdgeNode {
    pub fn new(cfg: EdgeNodeConfig, env: Environment, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(cfg.index as u64);
        EdgeNode {
            battery: Battery::new(cfg.battery),
            last_keepalive_ms: cfg.start_ms,
            last_step_ms: cfg.start_ms,
            cfg,
            env,
            rng,
            recording: None,
            stopped: Vec::new(),
            outbox: VecDeque::new(),
            connected: false,
            backoff: Backoff::default(),
            counters: EdgeCounters::default(),
        }
    }

    pub fn imei(&self) -> &str {
        &self.cfg.imei
    }

    pub fn config(&self) -> &EdgeNodeConfig {
        &self.cfg
    }

    pub fn counters(&self) -> &EdgeCounters {
        &self.counters
    }

    pub fn battery(&self) -> &Battery {
        &self.battery
    }

    pub fn is_silent(&self) -> bool {
        self.battery.is_empty()
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    pub fn position_at(&self, t_ms: i64) -> GeoPoint {
        self.cfg.mobility.position_at(t_ms - self.cfg.start_ms)
    }

    /// Address the phone currently reports; changes on every churn.
    pub fn ip(&self) -> String {
        let i = self.cfg.index;
        format!(
            "10.{}.{}.{}",
            (i >> 8) & 0xff,
            i & 0xff,
            1 + self.counters.churns % 254
        )
    }

    /// Transport source address, `ip:port`.
    pub fn source_addr(&self) -> String {
        format!("{}:{}", self.ip(), 40_000 + self.counters.churns % 20_000)
    }

    /// Samples recorded but not yet handed to the transport.
    pub fn buffered_samples(&self) -> u64 {
        let recording: usize = self
            .recording
            .iter()
            .flat_map(|r| &r.sensors)
            .map(|s| s.records.len())
            .sum();
        let stopped: usize = self.stopped.iter().map(|s| s.sensor_session_data.len()).sum();
        let queued: usize = self
            .outbox
            .iter()
            .map(|m| match m {
                Message::SensorData(d) => d.record_count().unwrap_or(0),
                _ => 0,
            })
            .sum();
        (recording + stopped + queued) as u64
    }

    /// Length of the open session at `now_ms`, if any.
    pub fn open_session_ms(&self, now_ms: i64) -> Option<i64> {
        self.recording.as_ref().map(|r| now_ms - r.started_ms)
    }

    fn keepalives_withheld(&self, t_ms: i64) -> bool {
        let off = t_ms - self.cfg.start_ms;
        self.cfg.keepalive_outages.iter().any(|&(a, b)| off >= a && off < b)
    }

    fn keepalive(&self, t_ms: i64) -> Message {
        let p = self.position_at(t_ms);
        Message::KeepAlive(KeepAliveMsg {
            battery_life: self.battery.percent(),
            imei: self.cfg.imei.clone(),
            ip: self.ip(),
            latitude: p.latitude,
            longitude: p.longitude,
            sensors: self.cfg.sensors.iter().map(|s| s.name.clone()).collect(),
        })
    }

    pub fn wants_connect(&self, now_ms: i64) -> bool {
        !self.connected && !self.is_silent() && self.backoff.ready(now_ms)
    }

    /// Both connections are up; the first keepalive goes out right away.
    pub fn on_connected(&mut self, now_ms: i64) {
        self.connected = true;
        self.backoff.reset();
        self.counters.connects += 1;
        if !self.keepalives_withheld(now_ms) {
            self.outbox.push_front(self.keepalive(now_ms));
        }
        self.last_keepalive_ms = now_ms;
    }

    pub fn on_connect_failed(&mut self, now_ms: i64) -> i64 {
        self.counters.connect_failures += 1;
        self.backoff.failed(now_ms)
    }

    /// Connections dropped. Stale keepalives are discarded; data stays queued.
    pub fn on_disconnected(&mut self) {
        self.connected = false;
        self.outbox.retain(|m| !matches!(m, Message::KeepAlive(_)));
    }

    /// New source address. The caller closes and reopens both connections.
    pub fn churn(&mut self) {
        self.on_disconnected();
        self.counters.churns += 1;
        self.backoff.reset();
    }

    fn sample_until(&mut self, t_ms: i64) {
        let Some(rec) = self.recording.as_mut() else {
            return;
        };
        let mut generated = 0u64;
        for s in &mut rec.sensors {
            loop {
                let at = rec.started_ms + (s.next_n as f64 * 1000.0 / s.frequency).round() as i64;
                if at >= t_ms {
                    break;
                }
                let position = self.cfg.mobility.position_at(at - self.cfg.start_ms);
                let r = sample(
                    &s.name,
                    SampleAt {
                        t_ms: at,
                        position,
                        imei: &self.cfg.imei,
                    },
                    &self.env,
                    &mut self.rng,
                );
                let size = serde_json::to_vec(&r).map(|v| v.len()).unwrap_or(0) as u64;
                let e = self.counters.record_bytes.entry(s.name.clone()).or_default();
                e.0 += 1;
                e.1 += size;
                s.records.push(r);
                s.next_n += 1;
                generated += 1;
            }
        }
        self.counters.samples_generated += generated;
        self.battery.sampled(generated);
    }

    /// Advances the node to `to_ms`: samples, keepalives, battery.
    pub fn step(&mut self, to_ms: i64) {
        if self.is_silent() || to_ms <= self.last_step_ms {
            return;
        }
        self.sample_until(to_ms);
        self.battery.elapse(to_ms - self.last_step_ms);
        self.last_step_ms = to_ms;
        let period = self.cfg.keepalive_period_ms;
        while self.last_keepalive_ms + period <= to_ms {
            self.last_keepalive_ms += period;
            let t = self.last_keepalive_ms;
            if self.connected && !self.is_silent() && !self.keepalives_withheld(t) {
                self.outbox.push_back(self.keepalive(t));
            }
        }
    }

    /// Decodes and obeys one command frame.
    pub fn receive(&mut self, frame: &[u8], now_ms: i64) -> Result<(), wire::WireError> {
        if self.is_silent() {
            return Ok(());
        }
        self.counters.bytes_rx += frame.len() as u64;
        match wire::decode(frame)? {
            Message::Command(cmd) => {
                self.handle_command(&cmd, now_ms);
                Ok(())
            }
            other => {
                tracing::warn!(imei = %self.cfg.imei, kind = ?other.imei(), "non-command frame on command channel");
                Ok(())
            }
        }
    }

    pub fn handle_command(&mut self, cmd: &CommandMsg, now_ms: i64) {
        if self.is_silent() {
            return;
        }
        *self.counters.commands_rx.entry(cmd.kind()).or_default() += 1;
        match cmd {
            CommandMsg::Start { sensors } => {
                if self.recording.is_some() {
                    tracing::warn!(imei = %self.cfg.imei, "START while recording ignored");
                    self.counters.ignored_commands += 1;
                    return;
                }
                let mut active: Vec<ActiveSensor> = Vec::new();
                for req in sensors {
                    let Some(spec) = self.cfg.sensors.iter().find(|s| s.name == req.name) else {
                        tracing::warn!(imei = %self.cfg.imei, sensor = %req.name, "START names a sensor this node lacks");
                        continue;
                    };
                    let Ok(frequency) = clamp_frequency(req.frequency, spec) else {
                        continue;
                    };
                    active.retain(|a| a.name != req.name);
                    active.push(ActiveSensor {
                        name: req.name.clone(),
                        frequency,
                        next_n: 0,
                        records: Vec::new(),
                    });
                }
                self.recording = Some(Recording {
                    started_ms: now_ms,
                    sensors: active,
                });
            }
            CommandMsg::Stop => {
                self.sample_until(now_ms);
                let Some(rec) = self.recording.take() else {
                    self.counters.ignored_commands += 1;
                    return;
                };
                self.counters.sessions += 1;
                if now_ms - rec.started_ms > LONG_SESSION_MS {
                    self.counters.long_sessions += 1;
                }
                for s in rec.sensors {
                    self.stopped.push(SensorSession {
                        sensor_name: s.name,
                        sensor_session_data: s.records,
                    });
                }
            }
            CommandMsg::Send { compress } => self.send(*compress, now_ms),
            CommandMsg::CaptureImage => {
                let dirt = self.dirt_at(now_ms);
                let png = street_image(dirt, &mut self.rng);
                let p = self.position_at(now_ms);
                self.outbox.push_back(Message::ImageData(ImageDataMsg {
                    imei: self.cfg.imei.clone(),
                    latitude: p.latitude,
                    longitude: p.longitude,
                    encoded_image_string: BASE64.encode(png),
                }));
            }
        }
    }

    fn dirt_at(&self, t_ms: i64) -> f64 {
        let off = t_ms - self.cfg.start_ms;
        self.cfg
            .dirt
            .iter()
            .take_while(|d| d.0 <= off)
            .last()
            .map_or(0.0, |d| d.1)
    }

    fn send(&mut self, compress: bool, now_ms: i64) {
        let p = self.position_at(now_ms);
        let mut chunks: Vec<SessionMap> = Vec::new();
        let mut current = SessionMap::new();
        let mut count = 0usize;
        for session in std::mem::take(&mut self.stopped) {
            for part in session.sensor_session_data.chunks(CHUNK_RECORDS.max(1)) {
                if count + part.len() > CHUNK_RECORDS && count > 0 {
                    chunks.push(std::mem::take(&mut current));
                    count = 0;
                }
                current.entry(session.sensor_name.clone()).or_default().push(SensorSession {
                    sensor_name: session.sensor_name.clone(),
                    sensor_session_data: part.to_vec(),
                });
                count += part.len();
            }
        }
        if !current.is_empty() {
            chunks.push(current);
        }
        for map in chunks {
            let payload = if compress {
                match SensorPayload::compress(&map) {
                    Ok(p) => p,
                    Err(e) => {
                        tracing::warn!(imei = %self.cfg.imei, error = %e, "compression failed; sending plain");
                        SensorPayload::Plain(map)
                    }
                }
            } else {
                SensorPayload::Plain(map)
            };
            self.outbox.push_back(Message::SensorData(SensorDataMsg {
                imei: self.cfg.imei.clone(),
                latitude: p.latitude,
                longitude: p.longitude,
                payload,
            }));
        }
        self.outbox
            .push_back(Message::SensorData(SensorDataMsg::end_marker(self.cfg.imei.clone(), p.latitude, p.longitude)));
    }

    /// Encodes and hands over everything queued, when connected and powered.
    pub fn take_frames(&mut self) -> Vec<Frame> {
        if !self.connected || self.is_silent() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.outbox.len());
        while let Some(msg) = self.outbox.pop_front() {
            let bytes = match wire::encode(&msg) {
                Ok(b) => b,
                Err(e) => {
                    tracing::error!(imei = %self.cfg.imei, error = %e, "dropping unencodable message");
                    continue;
                }
            };
            let n = bytes.len() as u64;
            self.counters.bytes_tx += n;
            let channel = match &msg {
                Message::KeepAlive(_) => {
                    self.counters.keepalives_tx += 1;
                    self.counters.keepalive_bytes_tx += n;
                    Channel::Command
                }
                Message::SensorData(d) => {
                    self.counters.sensor_data_tx += 1;
                    self.counters.data_bytes_tx += n;
                    self.counters.samples_transmitted += d.record_count().unwrap_or(0) as u64;
                    Channel::Data
                }
                Message::ImageData(_) => {
                    self.counters.image_data_tx += 1;
                    self.counters.image_bytes_tx += n;
                    Channel::Data
                }
                Message::Command(_) => Channel::Command,
            };
            self.battery.transmitted(bytes.len());
            out.push(Frame { channel, bytes });
        }
        out
    }

    /// Puts frames the transport could not write back at the head of the queue.
    pub fn requeue(&mut self, frames: Vec<Frame>) {
        for f in frames.into_iter().rev() {
            if let Ok(msg) = wire::decode(&f.bytes) {
                let n = f.bytes.len() as u64;
                self.counters.bytes_tx -= n;
                match &msg {
                    Message::KeepAlive(_) => {
                        self.counters.keepalives_tx -= 1;
                        self.counters.keepalive_bytes_tx -= n;
                        continue;
                    }
                    Message::SensorData(d) => {
                        self.counters.sensor_data_tx -= 1;
                        self.counters.data_bytes_tx -= n;
                        self.counters.samples_transmitted -= d.record_count().unwrap_or(0) as u64;
                    }
                    Message::ImageData(_) => {
                        self.counters.image_data_tx -= 1;
                        self.counters.image_bytes_tx -= n;
                    }
                    Message::Command(_) => {}
                }
                self.outbox.push_front(msg);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::command::{SensorTable, AIR_QUALITY, GPS};
    use crate::wire::SensorFrequency;

    const T0: i64 = 1_700_000_000_000;

    fn node(sensors: &[&str]) -> EdgeNode {
        let table = SensorTable::default();
        let specs = sensors.iter().map(|s| table.get(s).unwrap().clone()).collect();
        let cfg = EdgeNodeConfig::new(
            "358240051111110",
            1,
            specs,
            Mobility::fixed(GeoPoint::new(28.5, 77.2).unwrap()),
            T0,
        );
        EdgeNode::new(cfg, Environment::default(), 7)
    }

    fn decode_all(frames: &[Frame]) -> Vec<Message> {
        frames.iter().map(|f| wire::decode(&f.bytes).unwrap()).collect()
    }

    fn start(sensor: &str, f: f64) -> CommandMsg {
        CommandMsg::Start {
            sensors: vec![SensorFrequency::new(sensor, f)],
        }
    }

    #[test]
    fn gps_at_one_hz_for_ten_seconds() {
        let mut n = node(&[GPS]);
        n.handle_command(&start(GPS, 1.0), T0);
        n.step(T0 + 10_000);
        assert_eq!(n.counters().samples_generated, 10);
        assert_eq!(n.buffered_samples(), 10);
    }

    #[test]
    fn start_is_clamped_to_sensor_maximum() {
        let mut n = node(&[AIR_QUALITY]);
        n.handle_command(&start(AIR_QUALITY, 50.0), T0);
        n.step(T0 + 10_000);
        assert_eq!(n.counters().samples_generated, 10);
    }

    #[test]
    fn keepalives_follow_period() {
        let mut n = node(&[GPS]);
        n.on_connected(T0);
        n.take_frames();
        n.step(T0 + 35_000);
        let msgs = decode_all(&n.take_frames());
        assert_eq!(msgs.len(), 3);
        assert!(msgs.iter().all(|m| matches!(m, Message::KeepAlive(_))));
    }

    #[test]
    fn stop_send_flushes_buffer_then_end_marker() {
        let mut n = node(&[GPS]);
        n.on_connected(T0);
        n.take_frames();
        n.handle_command(&start(GPS, 1.0), T0);
        n.step(T0 + 20_000);
        n.handle_command(&CommandMsg::Stop, T0 + 20_000);
        n.handle_command(&CommandMsg::Send { compress: true }, T0 + 20_000);
        let msgs: Vec<Message> = decode_all(&n.take_frames())
            .into_iter()
            .filter(|m| !matches!(m, Message::KeepAlive(_)))
            .collect();
        assert_eq!(msgs.len(), 2);
        let Message::SensorData(d) = &msgs[0] else { panic!() };
        assert_eq!(d.record_count().unwrap(), 20);
        assert!(matches!(d.payload, SensorPayload::Compressed(_)));
        let Message::SensorData(end) = &msgs[1] else { panic!() };
        assert!(end.is_end_marker());
        assert_eq!(n.buffered_samples(), 0);
        assert_eq!(n.counters().samples_transmitted, 20);
    }

    #[test]
    fn send_with_empty_buffer_is_only_end_marker() {
        let mut n = node(&[GPS]);
        n.on_connected(T0);
        n.take_frames();
        n.handle_command(&CommandMsg::Send { compress: false }, T0);
        let msgs = decode_all(&n.take_frames());
        assert_eq!(msgs.len(), 1);
        assert!(matches!(&msgs[0], Message::SensorData(d) if d.is_end_marker()));
    }

    #[test]
    fn start_while_recording_is_ignored() {
        let mut n = node(&[GPS]);
        n.handle_command(&start(GPS, 1.0), T0);
        n.handle_command(&start(GPS, 0.5), T0 + 5_000);
        n.step(T0 + 10_000);
        assert_eq!(n.counters().samples_generated, 10);
        assert_eq!(n.counters().ignored_commands, 1);
    }

    #[test]
    fn capture_image_is_valid_png() {
        let mut n = node(&[GPS]);
        n.on_connected(T0);
        n.take_frames();
        n.handle_command(&CommandMsg::CaptureImage, T0);
        let msgs = decode_all(&n.take_frames());
        let Message::ImageData(img) = &msgs[0] else { panic!() };
        image::load_from_memory(&img.image_bytes().unwrap()).unwrap();
    }

    #[test]
    fn dead_battery_is_silent() {
        let mut n = node(&[GPS]);
        n.cfg.battery.start = 0.0;
        n.battery = Battery::new(n.cfg.battery);
        n.on_connected(T0);
        n.handle_command(&start(GPS, 1.0), T0);
        n.step(T0 + 60_000);
        assert!(n.take_frames().is_empty());
        assert_eq!(n.counters().samples_generated, 0);
    }

    #[test]
    fn churn_keeps_session_buffer_and_changes_ip() {
        let mut n = node(&[GPS]);
        n.on_connected(T0);
        n.take_frames();
        let ip = n.ip();
        n.handle_command(&start(GPS, 1.0), T0);
        n.step(T0 + 5_000);
        n.churn();
        assert_eq!(n.buffered_samples(), 5);
        assert!(n.wants_connect(T0 + 5_000));
        n.on_connected(T0 + 5_000);
        let msgs = decode_all(&n.take_frames());
        let Message::KeepAlive(ka) = &msgs[0] else { panic!() };
        assert_ne!(ka.ip, ip);
        n.step(T0 + 8_000);
        assert_eq!(n.buffered_samples(), 8);
    }

    #[test]
    fn disconnected_node_keeps_data_queued() {
        let mut n = node(&[GPS]);
        n.handle_command(&start(GPS, 1.0), T0);
        n.step(T0 + 3_000);
        n.handle_command(&CommandMsg::Stop, T0 + 3_000);
        n.handle_command(&CommandMsg::Send { compress: false }, T0 + 3_000);
        assert!(n.take_frames().is_empty());
        assert_eq!(n.buffered_samples(), 3);
        n.on_connected(T0 + 4_000);
        let frames = n.take_frames();
        assert_eq!(frames.len(), 3);
        assert_eq!(n.buffered_samples(), 0);
        n.requeue(frames);
        assert_eq!(n.buffered_samples(), 3);
        assert_eq!(n.counters().samples_transmitted, 0);
    }

    #[test]
    fn backoff_doubles_to_cap() {
        let mut b = Backoff::default();
        assert!(b.ready(0));
        let waits: Vec<i64> = (0..9).map(|_| {
            b.failed(0);
            b.wait_ms()
        }).collect();
        assert_eq!(waits, [1_000, 2_000, 4_000, 8_000, 16_000, 32_000, 60_000, 60_000, 60_000]);
        assert!(!b.ready(59_999));
        b.reset();
        assert!(b.ready(0));
    }
}
