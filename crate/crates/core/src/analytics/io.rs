//! CSV formats for vehicle traces and segment tables.
//!
//! Trace: `timestamp_iso8601,vehicle_id,latitude,longitude`.
//! Segments: `id,start_lat,start_lon,end_lat,end_lon[,free_flow_kmh]`.

use std::io::{Read, Write};

use chrono::{DateTime, SecondsFormat, Utc};

use super::geo::GeoPoint;
use super::traffic::{RoadSegment, TraceFix};
use super::AnalyticsError;

fn row_err(row: usize, reason: impl Into<String>) -> AnalyticsError {
    AnalyticsError::MalformedRow {
        row,
        reason: reason.into(),
    }
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, row: usize, name: &str) -> Result<&'a str, AnalyticsError> {
    rec.get(idx)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| row_err(row, format!("missing `{name}`")))
}

fn number(s: &str, row: usize, name: &str) -> Result<f64, AnalyticsError> {
    s.parse::<f64>()
        .map_err(|_| row_err(row, format!("`{name}` is not a number: {s}")))
}

fn point(lat: f64, lon: f64, row: usize) -> Result<GeoPoint, AnalyticsError> {
    GeoPoint::new(lat, lon).map_err(|e| row_err(row, e.to_string()))
}

pub fn format_timestamp(ms: i64) -> String {
    DateTime::<Utc>::from_timestamp_millis(ms)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Millis, true))
        .unwrap_or_else(|| ms.to_string())
}

pub fn parse_timestamp(s: &str) -> Option<i64> {
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.timestamp_millis())
}

/// Reads a trace file. Row numbers in errors count the header as row 1.
pub fn read_trace<R: Read>(reader: R) -> Result<Vec<TraceFix>, AnalyticsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let mut fixes = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| row_err(row, e.to_string()))?;
        let ts = field(&rec, 0, row, "timestamp_iso8601")?;
        let timestamp_ms =
            parse_timestamp(ts).ok_or_else(|| row_err(row, format!("bad timestamp `{ts}`")))?;
        let vehicle_id = field(&rec, 1, row, "vehicle_id")?.to_string();
        let lat = number(field(&rec, 2, row, "latitude")?, row, "latitude")?;
        let lon = number(field(&rec, 3, row, "longitude")?, row, "longitude")?;
        fixes.push(TraceFix {
            vehicle_id,
            timestamp_ms,
            position: point(lat, lon, row)?,
        });
    }
    Ok(fixes)
}

pub fn write_trace<W: Write>(writer: W, fixes: &[TraceFix]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp_iso8601", "vehicle_id", "latitude", "longitude"])?;
    for f in fixes {
        w.write_record([
            format_timestamp(f.timestamp_ms),
            f.vehicle_id.clone(),
            f.position.latitude.to_string(),
            f.position.longitude.to_string(),
        ])?;
    }
    w.flush()
}

pub fn read_segments<R: Read>(reader: R) -> Result<Vec<RoadSegment>, AnalyticsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let mut segments: Vec<RoadSegment> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| row_err(row, e.to_string()))?;
        let id_s = field(&rec, 0, row, "id")?;
        let id = id_s
            .parse::<u64>()
            .map_err(|_| row_err(row, format!("`id` is not an unsigned integer: {id_s}")))?;
        if segments.iter().any(|s| s.id == id) {
            return Err(row_err(row, format!("duplicate segment id {id}")));
        }
        let mut nums = [0.0; 4];
        for (k, name) in ["start_lat", "start_lon", "end_lat", "end_lon"].iter().enumerate() {
            nums[k] = number(field(&rec, k + 1, row, name)?, row, name)?;
        }
        let free_flow = match rec.get(5).map(str::trim).filter(|s| !s.is_empty()) {
            Some(s) => Some(number(s, row, "free_flow_kmh")?),
            None => None,
        };
        let seg = RoadSegment::new(
            id,
            point(nums[0], nums[1], row)?,
            point(nums[2], nums[3], row)?,
            free_flow,
        )
        .map_err(|e| row_err(row, e.to_string()))?;
        segments.push(seg);
    }
    Ok(segments)
}

pub fn write_segments<W: Write>(writer: W, segments: &[RoadSegment]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "start_lat", "start_lon", "end_lat", "end_lon", "free_flow_kmh"])?;
    for s in segments {
        w.write_record([
            s.id.to_string(),
            s.start.latitude.to_string(),
            s.start.longitude.to_string(),
            s.end.latitude.to_string(),
            s.end.longitude.to_string(),
            s.free_flow_speed_kmh.map(|f| f.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_round_trip() {
        let fixes = vec![
            TraceFix {
                vehicle_id: "M15".into(),
                timestamp_ms: 1_699_999_800_123,
                position: GeoPoint::new(40.7736, -73.9566).unwrap(),
            },
            TraceFix {
                vehicle_id: "M15".into(),
                timestamp_ms: 1_699_999_801_000,
                position: GeoPoint::new(40.77371234567891, -73.95651).unwrap(),
            },
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &fixes).unwrap();
        assert_eq!(read_trace(buf.as_slice()).unwrap(), fixes);
    }

    #[test]
    fn malformed_row_number() {
        let src = "timestamp_iso8601,vehicle_id,latitude,longitude\n\
                   2023-11-14T22:10:00Z,bus,40.7,-73.9\n\
                   2023-11-14T22:10:01Z,bus,north,-73.9\n";
        match read_trace(src.as_bytes()) {
            Err(AnalyticsError::MalformedRow { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn segments_optional_free_flow() {
        let src = "id,start_lat,start_lon,end_lat,end_lon,free_flow_kmh\n\
                   1,40.77,-73.95,40.78,-73.95,20\n\
                   2,40.78,-73.95,40.79,-73.95\n";
        let segs = read_segments(src.as_bytes()).unwrap();
        assert_eq!(segs[0].free_flow_speed_kmh, Some(20.0));
        assert_eq!(segs[1].free_flow_speed_kmh, None);
    }

    #[test]
    fn duplicate_segment_id() {
        let src = "id,start_lat,start_lon,end_lat,end_lon\n\
                   1,40.77,-73.95,40.78,-73.95\n\
                   1,40.78,-73.95,40.79,-73.95\n";
        assert!(matches!(
            read_segments(src.as_bytes()),
            Err(AnalyticsError::MalformedRow { row: 3, .. })
        ));
    }
}
