//! On-wire message vocabulary shared by edges and the controller.
//!
//! Every message is a single JSON object. On a stream transport each object
//! is written on its own line, so a frame is the compact JSON text followed by
//! `\n`. Field names follow the edge application's historical format
//! (`isData`, `keep_alive_status`, `sensorSessionData`, ...).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Largest carry the deframer keeps before giving up on a peer.
pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("malformed JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported command `{0}`")]
    UnsupportedCommand(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("frame exceeds {limit} bytes")]
    FrameTooLarge { limit: usize },
    #[error("compressed payload is corrupt: {0}")]
    Compression(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> WireError {
    WireError::InvalidField {
        field,
        reason: reason.into(),
    }
}

/// Periodic liveness ping from an edge.
#[derive(Debug, Clone, PartialEq)]
pub struct KeepAliveMsg {
    pub battery_life: u8,
    pub imei: String,
    pub ip: String,
    pub latitude: f64,
    pub longitude: f64,
    pub sensors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataMsg {
    pub imei: String,
    pub latitude: f64,
    pub longitude: f64,
    pub encoded_image_string: String,
}

impl ImageDataMsg {
    pub fn image_bytes(&self) -> Result<Vec<u8>, WireError> {
        BASE64
            .decode(self.encoded_image_string.as_bytes())
            .map_err(|e| invalid("encodedImageString", e.to_string()))
    }
}

/// One reading. Sensor-specific values (`x`, `y`, `z`, `value`, ...) live in
/// `values` and are flattened into the record object on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub measurement_unit: String,
    pub name: String,
    /// Epoch milliseconds. Older edges omit it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
    #[serde(flatten)]
    pub values: BTreeMap<String, Value>,
}

impl SensorRecord {
    pub fn value_f64(&self, key: &str) -> Option<f64> {
        self.values.get(key).and_then(Value::as_f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSession {
    #[serde(rename = "sensorName")]
    pub sensor_name: String,
    #[serde(rename = "sensorSessionData")]
    pub sensor_session_data: Vec<SensorRecord>,
}

pub type SessionMap = BTreeMap<String, Vec<SensorSession>>;

/// Body of a sensor data message: either plain sessions or the same map
/// DEFLATE-compressed and base64-wrapped (sent when SEND asked for it).
#[derive(Debug, Clone, PartialEq)]
pub enum SensorPayload {
    Plain(SessionMap),
    Compressed(String),
}

impl SensorPayload {
    pub fn compress(sessions: &SessionMap) -> Result<Self, WireError> {
        let json = serde_json::to_vec(sessions)?;
        let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&json)
            .map_err(|e| WireError::Compression(e.to_string()))?;
        let deflated = enc
            .finish()
            .map_err(|e| WireError::Compression(e.to_string()))?;
        Ok(SensorPayload::Compressed(BASE64.encode(deflated)))
    }

    /// The session map, inflating if necessary.
    pub fn sessions(&self) -> Result<SessionMap, WireError> {
        match self {
            SensorPayload::Plain(map) => Ok(map.clone()),
            SensorPayload::Compressed(b64) => {
                let raw = BASE64
                    .decode(b64.as_bytes())
                    .map_err(|e| WireError::Compression(e.to_string()))?;
                let mut json = Vec::new();
                DeflateDecoder::new(raw.as_slice())
                    .read_to_end(&mut json)
                    .map_err(|e| WireError::Compression(e.to_string()))?;
                Ok(serde_json::from_slice(&json)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorDataMsg {
    pub imei: String,
    pub latitude: f64,
    pub longitude: f64,
    pub payload: SensorPayload,
}

impl SensorDataMsg {
    /// A message with no sessions. Edges send one after the last chunk of a
    /// SEND to close the upload.
    pub fn end_marker(imei: impl Into<String>, latitude: f64, longitude: f64) -> Self {
        SensorDataMsg {
            imei: imei.into(),
            latitude,
            longitude,
            payload: SensorPayload::Plain(SessionMap::new()),
        }
    }

    pub fn is_end_marker(&self) -> bool {
        matches!(&self.payload, SensorPayload::Plain(m) if m.is_empty())
    }

    /// Number of records across all sessions.
    pub fn record_count(&self) -> Result<usize, WireError> {
        Ok(self
            .payload
            .sessions()?
            .values()
            .flatten()
            .map(|s| s.sensor_session_data.len())
            .sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandType {
    Start,
    Stop,
    Send,
    CaptureImage,
}

impl CommandType {
    pub const ALL: [CommandType; 4] = [
        CommandType::Start,
        CommandType::Stop,
        CommandType::Send,
        CommandType::CaptureImage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CommandType::Start => "START",
            CommandType::Stop => "STOP",
            CommandType::Send => "SEND",
            CommandType::CaptureImage => "CAPTURE_IMAGE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        CommandType::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrequency {
    pub name: String,
    /// Hz.
    pub frequency: f64,
}

impl SensorFrequency {
    pub fn new(name: impl Into<String>, frequency: f64) -> Self {
        SensorFrequency {
            name: name.into(),
            frequency,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandMsg {
    Start { sensors: Vec<SensorFrequency> },
    Stop,
    Send { compress: bool },
    CaptureImage,
}

impl CommandMsg {
    pub fn kind(&self) -> CommandType {
        match self {
            CommandMsg::Start { .. } => CommandType::Start,
            CommandMsg::Stop => CommandType::Stop,
            CommandMsg::Send { .. } => CommandType::Send,
            CommandMsg::CaptureImage => CommandType::CaptureImage,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    KeepAlive(KeepAliveMsg),
    SensorData(SensorDataMsg),
    ImageData(ImageDataMsg),
    Command(CommandMsg),
}

impl Message {
    pub fn imei(&self) -> Option<&str> {
        match self {
            Message::KeepAlive(m) => Some(&m.imei),
            Message::SensorData(m) => Some(&m.imei),
            Message::ImageData(m) => Some(&m.imei),
            Message::Command(_) => None,
        }
    }
}

impl From<KeepAliveMsg> for Message {
    fn from(m: KeepAliveMsg) -> Self {
        Message::KeepAlive(m)
    }
}
impl From<SensorDataMsg> for Message {
    fn from(m: SensorDataMsg) -> Self {
        Message::SensorData(m)
    }
}
impl From<ImageDataMsg> for Message {
    fn from(m: ImageDataMsg) -> Self {
        Message::ImageData(m)
    }
}
impl From<CommandMsg> for Message {
    fn from(m: CommandMsg) -> Self {
        Message::Command(m)
    }
}

// Serde representations. These carry the constant discriminator flags the
// domain types leave implicit.

#[derive(Serialize, Deserialize)]
struct KeepAliveRepr {
    battery_life: i64,
    imei: String,
    ip: String,
    #[serde(rename = "isData")]
    is_data: bool,
    #[serde(rename = "isImage")]
    is_image: bool,
    keep_alive_status: bool,
    latitude: f64,
    longitude: f64,
    sensors: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ImageRepr {
    imei: String,
    #[serde(rename = "isData")]
    is_data: bool,
    #[serde(rename = "isImage")]
    is_image: bool,
    latitude: f64,
    longitude: f64,
    #[serde(rename = "encodedImageString")]
    encoded_image_string: String,
}

#[derive(Serialize, Deserialize)]
struct SensorDataRepr {
    imei: String,
    #[serde(rename = "isData")]
    is_data: bool,
    #[serde(rename = "isImage")]
    is_image: bool,
    latitude: f64,
    longitude: f64,
    #[serde(rename = "sensorData", default, skip_serializing_if = "Option::is_none")]
    sensor_data: Option<SessionMap>,
    #[serde(
        rename = "compressedSensorData",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    compressed_sensor_data: Option<String>,
}

#[derive(Serialize)]
#[serde(tag = "messageType", rename_all = "SCREAMING_SNAKE_CASE")]
enum CommandRepr<'a> {
    Start {
        sensors: &'a [SensorFrequency],
    },
    Stop,
    Send {
        #[serde(skip_serializing_if = "std::ops::Not::not")]
        compress: bool,
    },
    CaptureImage,
}

#[derive(Deserialize)]
struct StartRepr {
    #[serde(default)]
    sensors: Option<Vec<SensorFrequency>>,
    /// Single-sensor form.
    #[serde(default)]
    sensor: Option<String>,
    #[serde(default)]
    frequency: Option<f64>,
}

#[derive(Deserialize)]
struct SendRepr {
    #[serde(default)]
    compress: bool,
}

fn check_imei(imei: &str) -> Result<(), WireError> {
    if imei.is_empty() {
        return Err(invalid("imei", "must be non-empty"));
    }
    Ok(())
}

fn check_position(latitude: f64, longitude: f64) -> Result<(), WireError> {
    if !latitude.is_finite() || !(-90.0..=90.0).contains(&latitude) {
        return Err(invalid("latitude", format!("{latitude} outside [-90, 90]")));
    }
    if !longitude.is_finite() || !(-180.0..=180.0).contains(&longitude) {
        return Err(invalid(
            "longitude",
            format!("{longitude} outside [-180, 180]"),
        ));
    }
    Ok(())
}

fn check_sessions(map: &SessionMap) -> Result<(), WireError> {
    for (key, sessions) in map {
        for session in sessions {
            if &session.sensor_name != key {
                return Err(invalid(
                    "sensorName",
                    format!("`{}` filed under `{key}`", session.sensor_name),
                ));
            }
            let mut last = i64::MIN;
            for rec in &session.sensor_session_data {
                if let Some(ts) = rec.timestamp {
                    if ts < last {
                        return Err(invalid(
                            "timestamp",
                            format!("{ts} precedes {last} in session `{key}`"),
                        ));
                    }
                    last = ts;
                }
            }
        }
    }
    Ok(())
}

fn check_start(sensors: &[SensorFrequency]) -> Result<(), WireError> {
    for s in sensors {
        if s.name.is_empty() {
            return Err(invalid("sensors", "sensor name must be non-empty"));
        }
        if !(s.frequency.is_finite() && s.frequency > 0.0) {
            return Err(invalid(
                "frequency",
                format!("{} Hz for `{}` must be > 0", s.frequency, s.name),
            ));
        }
    }
    Ok(())
}

/// Checks a message against its type invariants.
pub fn validate(msg: &Message) -> Result<(), WireError> {
    match msg {
        Message::KeepAlive(m) => {
            check_imei(&m.imei)?;
            if m.battery_life > 100 {
                return Err(invalid("battery_life", format!("{} > 100", m.battery_life)));
            }
            check_position(m.latitude, m.longitude)
        }
        Message::ImageData(m) => {
            check_imei(&m.imei)?;
            check_position(m.latitude, m.longitude)?;
            m.image_bytes().map(|_| ())
        }
        Message::SensorData(m) => {
            check_imei(&m.imei)?;
            check_position(m.latitude, m.longitude)?;
            match &m.payload {
                SensorPayload::Plain(map) => check_sessions(map),
                SensorPayload::Compressed(_) => check_sessions(&m.payload.sessions()?),
            }
        }
        Message::Command(CommandMsg::Start { sensors }) => check_start(sensors),
        Message::Command(_) => Ok(()),
    }
}

/// Serializes a message into one newline-terminated frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    validate(msg)?;
    let mut out = match msg {
        Message::KeepAlive(m) => serde_json::to_vec(&KeepAliveRepr {
            battery_life: i64::from(m.battery_life),
            imei: m.imei.clone(),
            ip: m.ip.clone(),
            is_data: false,
            is_image: false,
            keep_alive_status: true,
            latitude: m.latitude,
            longitude: m.longitude,
            sensors: m.sensors.clone(),
        })?,
        Message::ImageData(m) => serde_json::to_vec(&ImageRepr {
            imei: m.imei.clone(),
            is_data: false,
            is_image: true,
            latitude: m.latitude,
            longitude: m.longitude,
            encoded_image_string: m.encoded_image_string.clone(),
        })?,
        Message::SensorData(m) => {
            let (sensor_data, compressed_sensor_data) = match &m.payload {
                SensorPayload::Plain(map) => (Some(map.clone()), None),
                SensorPayload::Compressed(s) => (None, Some(s.clone())),
            };
            serde_json::to_vec(&SensorDataRepr {
                imei: m.imei.clone(),
                is_data: true,
                is_image: false,
                latitude: m.latitude,
                longitude: m.longitude,
                sensor_data,
                compressed_sensor_data,
            })?
        }
        Message::Command(cmd) => serde_json::to_vec(&match cmd {
            CommandMsg::Start { sensors } => CommandRepr::Start { sensors },
            CommandMsg::Stop => CommandRepr::Stop,
            CommandMsg::Send { compress } => CommandRepr::Send {
                compress: *compress,
            },
            CommandMsg::CaptureImage => CommandRepr::CaptureImage,
        })?,
    };
    out.push(b'\n');
    Ok(out)
}

fn flag(obj: &serde_json::Map<String, Value>, key: &str) -> Option<bool> {
    obj.get(key).and_then(Value::as_bool)
}

/// Parses one frame. A single trailing newline (and carriage return) is
/// tolerated.
pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    let body = frame.strip_suffix(b"\n").unwrap_or(frame);
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    let value: Value = serde_json::from_slice(body)?;
    let Value::Object(obj) = value else {
        return Err(WireError::Schema("frame is not a JSON object".into()));
    };

    let msg = if let Some(kind) = obj.get("messageType") {
        let kind = kind
            .as_str()
            .ok_or_else(|| WireError::Schema("`messageType` must be a string".into()))?;
        let kind = CommandType::parse(kind)
            .ok_or_else(|| WireError::UnsupportedCommand(kind.to_string()))?;
        let cmd = match kind {
            CommandType::Start => {
                let repr: StartRepr = serde_json::from_value(Value::Object(obj))?;
                let sensors = match (repr.sensors, repr.sensor) {
                    (Some(list), _) => list,
                    (None, Some(name)) => {
                        let frequency = repr.frequency.ok_or_else(|| {
                            WireError::Schema("START with `sensor` needs `frequency`".into())
                        })?;
                        vec![SensorFrequency { name, frequency }]
                    }
                    (None, None) => {
                        return Err(WireError::Schema(
                            "START needs `sensors` or `sensor`".into(),
                        ))
                    }
                };
                CommandMsg::Start { sensors }
            }
            CommandType::Stop => CommandMsg::Stop,
            CommandType::Send => {
                let repr: SendRepr = serde_json::from_value(Value::Object(obj))?;
                CommandMsg::Send {
                    compress: repr.compress,
                }
            }
            CommandType::CaptureImage => CommandMsg::CaptureImage,
        };
        Message::Command(cmd)
    } else if flag(&obj, "keep_alive_status") == Some(true) {
        let r: KeepAliveRepr = serde_json::from_value(Value::Object(obj))?;
        if r.is_data || r.is_image {
            return Err(WireError::Schema(
                "keepalive must have isData = isImage = false".into(),
            ));
        }
        let battery_life = u8::try_from(r.battery_life)
            .ok()
            .filter(|b| *b <= 100)
            .ok_or_else(|| invalid("battery_life", format!("{} outside [0, 100]", r.battery_life)))?;
        Message::KeepAlive(KeepAliveMsg {
            battery_life,
            imei: r.imei,
            ip: r.ip,
            latitude: r.latitude,
            longitude: r.longitude,
            sensors: r.sensors,
        })
    } else if flag(&obj, "isImage") == Some(true) {
        let r: ImageRepr = serde_json::from_value(Value::Object(obj))?;
        if r.is_data {
            return Err(WireError::Schema("image data must have isData = false".into()));
        }
        Message::ImageData(ImageDataMsg {
            imei: r.imei,
            latitude: r.latitude,
            longitude: r.longitude,
            encoded_image_string: r.encoded_image_string,
        })
    } else if flag(&obj, "isData") == Some(true) {
        let r: SensorDataRepr = serde_json::from_value(Value::Object(obj))?;
        let payload = match (r.sensor_data, r.compressed_sensor_data) {
            (Some(map), None) => SensorPayload::Plain(map),
            (None, Some(s)) => SensorPayload::Compressed(s),
            (None, None) => {
                return Err(WireError::Schema(
                    "sensor data needs `sensorData` or `compressedSensorData`".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(WireError::Schema(
                    "`sensorData` and `compressedSensorData` are exclusive".into(),
                ))
            }
        };
        Message::SensorData(SensorDataMsg {
            imei: r.imei,
            latitude: r.latitude,
            longitude: r.longitude,
            payload,
        })
    } else {
        return Err(WireError::Schema(
            "no discriminator (messageType, keep_alive_status, isImage, isData)".into(),
        ));
    };
    validate(&msg)?;
    Ok(msg)
}

/// Splits a byte stream into newline-terminated frames.
#[derive(Debug, Default)]
pub struct Deframer {
    carry: Vec<u8>,
    limit: Option<usize>,
}

impl Deframer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_limit(limit: usize) -> Self {
        Deframer {
            carry: Vec::new(),
            limit: Some(limit),
        }
    }

    /// Bytes received but not yet terminated by a newline.
    pub fn carry(&self) -> &[u8] {
        &self.carry
    }

    /// Feeds a chunk and returns every frame it completes, newline included.
    pub fn push(&mut self, chunk: &[u8]) -> Result<Vec<Vec<u8>>, WireError> {
        let mut frames = Vec::new();
        let mut rest = chunk;
        while let Some(pos) = rest.iter().position(|b| *b == b'\n') {
            let mut frame = std::mem::take(&mut self.carry);
            frame.extend_from_slice(&rest[..=pos]);
            frames.push(frame);
            rest = &rest[pos + 1..];
        }
        self.carry.extend_from_slice(rest);
        let limit = self.limit.unwrap_or(MAX_FRAME_BYTES);
        if self.carry.len() > limit {
            self.carry.clear();
            return Err(WireError::FrameTooLarge { limit });
        }
        Ok(frames)
    }
}

/// Functional form of [`Deframer::push`]: consumes the carry from the
/// previous call and returns the new one.
pub fn deframe(chunk: &[u8], carry: Vec<u8>) -> Result<(Vec<Vec<u8>>, Vec<u8>), WireError> {
    let mut d = Deframer {
        carry,
        limit: None,
    };
    let frames = d.push(chunk)?;
    Ok((frames, d.carry))
}
