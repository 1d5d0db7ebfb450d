//! Pulls analytics inputs (GPS fixes, scalar readings, images) out of stored
//! data messages.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::analytics::{GeoPoint, Reading, TraceFix};
use crate::command::GPS;
use crate::controller::StoredEntry;
use crate::wire::{ImageDataMsg, Message};

/// GPS fixes of one node in arrival order, keeping only strictly increasing
/// timestamps.
pub fn gps_fixes(imei: &str, entries: &[Arc<StoredEntry>]) -> Vec<TraceFix> {
    let mut out: Vec<TraceFix> = Vec::new();
    for entry in entries {
        let Message::SensorData(msg) = &entry.message else {
            continue;
        };
        let sessions = match msg.payload.sessions() {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(%imei, error = %e, "unreadable sensor payload");
                continue;
            }
        };
        for session in sessions.get(GPS).into_iter().flatten() {
            for rec in &session.sensor_session_data {
                let (Some(ts), Some(lat), Some(lon)) = (
                    rec.timestamp,
                    rec.value_f64("latitude"),
                    rec.value_f64("longitude"),
                ) else {
                    continue;
                };
                let Ok(position) = GeoPoint::new(lat, lon) else {
                    continue;
                };
                if out.last().is_some_and(|f| f.timestamp_ms >= ts) {
                    continue;
                }
                out.push(TraceFix {
                    vehicle_id: imei.to_string(),
                    timestamp_ms: ts,
                    position,
                });
            }
        }
    }
    out
}

/// GPS fixes of every node, grouped by node.
pub fn all_gps_fixes(data: &BTreeMap<String, Vec<Arc<StoredEntry>>>) -> Vec<TraceFix> {
    data.iter()
        .flat_map(|(imei, entries)| gps_fixes(imei, entries))
        .collect()
}

/// Most recent `value` of `sensor`, located where the carrying message was sent.
pub fn latest_reading(sensor: &str, entries: &[Arc<StoredEntry>]) -> Option<Reading> {
    entries.iter().rev().find_map(|entry| {
        let Message::SensorData(msg) = &entry.message else {
            return None;
        };
        let sessions = msg.payload.sessions().ok()?;
        let value = sessions
            .get(sensor)?
            .iter()
            .rev()
            .flat_map(|s| s.sensor_session_data.iter().rev())
            .find_map(|r| r.value_f64("value"))?;
        let location = GeoPoint::new(msg.latitude, msg.longitude).ok()?;
        Some(Reading::new(location, value))
    })
}

/// Most recent image at or after `since_ms`, with its receive time.
pub fn latest_image(entries: &[Arc<StoredEntry>], since_ms: i64) -> Option<(i64, &ImageDataMsg)> {
    entries
        .iter()
        .rev()
        .take_while(|e| e.received_at_ms >= since_ms)
        .find_map(|e| match &e.message {
            Message::ImageData(img) => Some((e.received_at_ms, img)),
            _ => None,
        })
}
