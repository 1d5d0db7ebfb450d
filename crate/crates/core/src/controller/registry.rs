use serde::{Deserialize, Serialize};

use crate::analytics::GeoPoint;
use crate::wire::{CommandMsg, KeepAliveMsg, SensorFrequency};

/// Where a node is in its START/STOP/SEND cycle, as seen by the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionState {
    Idle {
        since_ms: i64,
    },
    Recording {
        since_ms: i64,
        sensors: Vec<SensorFrequency>,
    },
    AwaitingSend {
        stopped_at_ms: i64,
        /// Sensors and start time of the session being held on the edge.
        started_ms: i64,
        sensors: Vec<SensorFrequency>,
        send_issued: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{command} not allowed while {state}")]
pub struct TransitionError {
    pub command: &'static str,
    pub state: &'static str,
}

impl SessionState {
    pub fn name(&self) -> &'static str {
        match self {
            SessionState::Idle { .. } => "idle",
            SessionState::Recording { .. } => "recording",
            SessionState::AwaitingSend { .. } => "awaiting_send",
        }
    }

    pub fn is_idle(&self) -> bool {
        matches!(self, SessionState::Idle { .. })
    }

    pub fn is_recording(&self) -> bool {
        matches!(self, SessionState::Recording { .. })
    }

    /// State after `cmd` is written to the edge.
    pub fn on_command(&self, cmd: &CommandMsg, now_ms: i64) -> Result<SessionState, TransitionError> {
        let err = || TransitionError {
            command: cmd.kind().as_str(),
            state: self.name(),
        };
        match (self, cmd) {
            (SessionState::Idle { .. }, CommandMsg::Start { sensors }) => Ok(SessionState::Recording {
                since_ms: now_ms,
                sensors: sensors.clone(),
            }),
            (SessionState::Recording { since_ms, sensors }, CommandMsg::Stop) => {
                Ok(SessionState::AwaitingSend {
                    stopped_at_ms: now_ms,
                    started_ms: *since_ms,
                    sensors: sensors.clone(),
                    send_issued: false,
                })
            }
            (
                SessionState::AwaitingSend {
                    stopped_at_ms,
                    started_ms,
                    sensors,
                    ..
                },
                CommandMsg::Send { .. },
            ) => Ok(SessionState::AwaitingSend {
                stopped_at_ms: *stopped_at_ms,
                started_ms: *started_ms,
                sensors: sensors.clone(),
                send_issued: true,
            }),
            (state, CommandMsg::CaptureImage) => Ok(state.clone()),
            _ => Err(err()),
        }
    }

    /// State after the edge finished uploading, if that closes a session.
    pub fn on_upload_complete(&self, now_ms: i64) -> Option<SessionState> {
        match self {
            SessionState::AwaitingSend {
                send_issued: true, ..
            } => Some(SessionState::Idle { since_ms: now_ms }),
            _ => None,
        }
    }
}

/// Controller-side mirror of one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub imei: String,
    /// Observed transport address; used for routing.
    pub last_addr: String,
    /// Address the edge reported about itself.
    pub reported_ip: String,
    pub registered_ms: i64,
    pub last_seen_ms: i64,
    pub battery: u8,
    pub location: GeoPoint,
    pub sensors: Vec<String>,
    pub session: SessionState,
    pub alive: bool,
}

impl NodeRecord {
    pub fn from_keepalive(msg: &KeepAliveMsg, addr: &str, now_ms: i64) -> Self {
        NodeRecord {
            imei: msg.imei.clone(),
            last_addr: addr.to_string(),
            reported_ip: msg.ip.clone(),
            registered_ms: now_ms,
            last_seen_ms: now_ms,
            battery: msg.battery_life,
            location: GeoPoint {
                latitude: msg.latitude,
                longitude: msg.longitude,
            },
            sensors: msg.sensors.clone(),
            session: SessionState::Idle { since_ms: now_ms },
            alive: true,
        }
    }

    /// Absorbs a keepalive. Returns whether the node came back from the dead.
    pub fn absorb(&mut self, msg: &KeepAliveMsg, addr: &str, now_ms: i64) -> bool {
        self.last_seen_ms = self.last_seen_ms.max(now_ms);
        self.battery = msg.battery_life;
        self.location = GeoPoint {
            latitude: msg.latitude,
            longitude: msg.longitude,
        };
        self.sensors = msg.sensors.clone();
        self.reported_ip = msg.ip.clone();
        self.last_addr = addr.to_string();
        let revived = !self.alive;
        self.alive = true;
        revived
    }

    pub fn silent_for_ms(&self, now_ms: i64) -> i64 {
        now_ms - self.last_seen_ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start() -> CommandMsg {
        CommandMsg::Start {
            sensors: vec![SensorFrequency::new("GPS", 1.0)],
        }
    }

    #[test]
    fn legal_cycle() {
        let s = SessionState::Idle { since_ms: 0 };
        let s = s.on_command(&start(), 10).unwrap();
        assert!(s.is_recording());
        let s = s.on_command(&CommandMsg::Stop, 30).unwrap();
        assert!(matches!(s, SessionState::AwaitingSend { send_issued: false, .. }));
        assert_eq!(s.on_upload_complete(31), None);
        let s = s.on_command(&CommandMsg::Send { compress: false }, 30).unwrap();
        assert_eq!(s.on_upload_complete(31), Some(SessionState::Idle { since_ms: 31 }));
    }

    #[test]
    fn illegal_edges() {
        let idle = SessionState::Idle { since_ms: 0 };
        assert!(idle.on_command(&CommandMsg::Stop, 1).is_err());
        assert!(idle.on_command(&CommandMsg::Send { compress: false }, 1).is_err());
        let rec = idle.on_command(&start(), 1).unwrap();
        let e = rec.on_command(&start(), 2).unwrap_err();
        assert_eq!(e.command, "START");
        assert_eq!(e.state, "recording");
        assert!(rec.on_command(&CommandMsg::Send { compress: false }, 2).is_err());
        let wait = rec.on_command(&CommandMsg::Stop, 3).unwrap();
        assert!(wait.on_command(&start(), 4).is_err());
        assert!(wait.on_command(&CommandMsg::Stop, 4).is_err());
    }

    #[test]
    fn capture_never_transitions() {
        let idle = SessionState::Idle { since_ms: 5 };
        assert_eq!(idle.on_command(&CommandMsg::CaptureImage, 9).unwrap(), idle);
    }
}
