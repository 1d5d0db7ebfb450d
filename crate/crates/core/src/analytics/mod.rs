//! Pure kernels consumed by the policy layer: distances, IDW fields,
//! trace-to-segment mapping, windowed speeds, hotspot flags, forecasting.

pub mod geo;
pub mod idw;
pub mod io;
pub mod traffic;

use thiserror::Error;

pub use io::{format_timestamp, parse_timestamp, read_segments, read_trace, write_segments, write_trace};
pub use geo::{distance_to_arc_km, haversine_km, lerp, GeoPoint, EARTH_RADIUS_KM, KM_PER_DEGREE};
pub use idw::{idw_at, idw_field, loocv_error, BoundingBox, PollutionField, Reading};
pub use traffic::{
    detect_hotspots, estimate_free_flow, forecast_ewma, free_flow_for, hotspot_timeline,
    map_to_segment, percentile, robust_outliers, segment_speeds, HotspotFlag, HotspotFlags,
    HotspotParams, RoadSegment, SegmentId, SegmentSpeedSeries, SpeedWindow, TraceFix,
};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("no data")]
    NoData,
    #[error("need at least {needed} readings, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("two readings share location {0:?}")]
    DuplicateLocation(GeoPoint),
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("grid of {rows}x{cols} cells is too large")]
    GridTooLarge { rows: usize, cols: usize },
    #[error("trace for vehicle `{vehicle}` is not strictly increasing at {timestamp_ms}")]
    NonMonotoneTrace { vehicle: String, timestamp_ms: i64 },
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
}
