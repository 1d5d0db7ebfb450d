//! Simulated sensing edges: a virtual clock, device models and the node actor.

pub mod battery;
pub mod clock;
pub mod generators;
pub mod mobility;
pub mod node;

pub use battery::{Battery, BatteryModel};
pub use clock::{ClockError, VirtualClock};
pub use generators::{AirQualityField, Environment, PollutionSource, Waveform, AIR_QUALITY_RECORD_BYTES};
pub use mobility::Mobility;
pub use node::{Backoff, EdgeCounters, EdgeNode, EdgeNodeConfig, Frame, LONG_SESSION_MS};
