//! Road-segment speeds, hotspot flags and the baseline speed forecaster.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::geo::{distance_to_arc_km, haversine_km, GeoPoint};
use super::AnalyticsError;

pub type SegmentId = u64;

/// Distances closer than this are treated as ties.
const TIE_EPSILON_KM: f64 = 1e-9;

const MS_PER_HOUR: f64 = 3_600_000.0;

/// Stretch of road between two consecutive stops, modelled as a great-circle chord.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: SegmentId,
    pub start: GeoPoint,
    pub end: GeoPoint,
    pub length_km: f64,
    /// Configured uncongested speed; estimated from data when absent.
    pub free_flow_speed_kmh: Option<f64>,
}

impl RoadSegment {
    pub fn new(
        id: SegmentId,
        start: GeoPoint,
        end: GeoPoint,
        free_flow_speed_kmh: Option<f64>,
    ) -> Result<Self, AnalyticsError> {
        let length_km = haversine_km(start, end);
        if !(length_km > 0.0) {
            return Err(AnalyticsError::InvalidInput(format!(
                "segment {id} has zero length"
            )));
        }
        if let Some(f) = free_flow_speed_kmh {
            if !(f > 0.0) {
                return Err(AnalyticsError::InvalidInput(format!(
                    "segment {id} free-flow speed must be > 0"
                )));
            }
        }
        Ok(RoadSegment {
            id,
            start,
            end,
            length_km,
            free_flow_speed_kmh,
        })
    }

    pub fn distance_km(&self, p: GeoPoint) -> f64 {
        distance_to_arc_km(p, self.start, self.end)
    }

    pub fn midpoint(&self) -> GeoPoint {
        super::geo::lerp(self.start, self.end, 0.5)
    }
}

/// Nearest segment within `snap_radius_km`; ties go to the lower id.
pub fn map_to_segment(
    p: GeoPoint,
    segments: &[RoadSegment],
    snap_radius_km: f64,
) -> Option<SegmentId> {
    let mut best: Option<(f64, SegmentId)> = None;
    for seg in segments {
        let d = seg.distance_km(p);
        if d > snap_radius_km {
            continue;
        }
        best = match best {
            None => Some((d, seg.id)),
            Some((bd, _)) if d < bd - TIE_EPSILON_KM => Some((d, seg.id)),
            Some((bd, bid)) if (d - bd).abs() <= TIE_EPSILON_KM && seg.id < bid => {
                Some((d.min(bd), seg.id))
            }
            keep => keep,
        };
    }
    best.map(|(_, id)| id)
}

/// One position report from a vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFix {
    pub vehicle_id: String,
    /// Epoch milliseconds.
    pub timestamp_ms: i64,
    pub position: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedWindow {
    /// Epoch milliseconds, a multiple of the window length.
    pub start_ms: i64,
    pub mean_speed_kmh: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpeedSeries {
    pub segment: SegmentId,
    pub window_s: u32,
    /// Non-empty windows in ascending order.
    pub windows: Vec<SpeedWindow>,
}

impl SegmentSpeedSeries {
    pub fn means(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.mean_speed_kmh).collect()
    }
}

/// Groups fixes by vehicle, checking each vehicle's timestamps strictly increase
/// in input order.
pub fn group_by_vehicle(
    fixes: &[TraceFix],
) -> Result<BTreeMap<&str, Vec<&TraceFix>>, AnalyticsError> {
    let mut by_vehicle: BTreeMap<&str, Vec<&TraceFix>> = BTreeMap::new();
    for fix in fixes {
        let track = by_vehicle.entry(fix.vehicle_id.as_str()).or_default();
        if let Some(last) = track.last() {
            if fix.timestamp_ms <= last.timestamp_ms {
                return Err(AnalyticsError::NonMonotoneTrace {
                    vehicle: fix.vehicle_id.clone(),
                    timestamp_ms: fix.timestamp_ms,
                });
            }
        }
        track.push(fix);
    }
    Ok(by_vehicle)
}

/// Windowed mean traversal speed per segment. Segments with no contributions
/// get an empty series.
pub fn segment_speeds(
    fixes: &[TraceFix],
    segments: &[RoadSegment],
    window_s: u32,
    snap_radius_km: f64,
) -> Result<BTreeMap<SegmentId, SegmentSpeedSeries>, AnalyticsError> {
    if window_s == 0 {
        return Err(AnalyticsError::InvalidInput("window must be > 0".into()));
    }
    let window_ms = i64::from(window_s) * 1000;
    let by_vehicle = group_by_vehicle(fixes)?;

    // segment -> window start -> contributions, in vehicle then time order.
    let mut acc: BTreeMap<SegmentId, BTreeMap<i64, Vec<f64>>> = segments
        .iter()
        .map(|s| (s.id, BTreeMap::new()))
        .collect();
    for track in by_vehicle.values() {
        let mapped: Vec<Option<SegmentId>> = track
            .iter()
            .map(|f| map_to_segment(f.position, segments, snap_radius_km))
            .collect();
        for i in 1..track.len() {
            let (Some(a), Some(b)) = (mapped[i - 1], mapped[i]) else {
                continue;
            };
            if a != b {
                continue;
            }
            let (p, q) = (track[i - 1], track[i]);
            let dt_ms = (q.timestamp_ms - p.timestamp_ms) as f64;
            let speed = haversine_km(p.position, q.position) / (dt_ms / MS_PER_HOUR);
            let mid = p.timestamp_ms + (q.timestamp_ms - p.timestamp_ms) / 2;
            let window = mid.div_euclid(window_ms) * window_ms;
            acc.entry(a).or_default().entry(window).or_default().push(speed);
        }
    }

    Ok(acc
        .into_iter()
        .map(|(segment, windows)| {
            let windows = windows
                .into_iter()
                .map(|(start_ms, speeds)| SpeedWindow {
                    start_ms,
                    mean_speed_kmh: speeds.iter().sum::<f64>() / speeds.len() as f64,
                    samples: speeds.len(),
                })
                .collect();
            (
                segment,
                SegmentSpeedSeries {
                    segment,
                    window_s,
                    windows,
                },
            )
        })
        .collect())
}

/// Linear-interpolated percentile (`q` in [0, 1]) of `values`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Free-flow speed estimate: 85th percentile of the observed window means.
pub fn estimate_free_flow(series: &SegmentSpeedSeries) -> Option<f64> {
    percentile(&series.means(), 0.85).filter(|f| *f > 0.0)
}

/// Configured free-flow speed, else the data-driven estimate.
pub fn free_flow_for(segment: &RoadSegment, series: Option<&SegmentSpeedSeries>) -> Option<f64> {
    segment
        .free_flow_speed_kmh
        .or_else(|| series.and_then(estimate_free_flow))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HotspotParams {
    /// Speed fraction of free flow below which a window counts as congested.
    pub alpha: f64,
    /// Consecutive congested windows needed.
    pub k: usize,
}

impl Default for HotspotParams {
    fn default() -> Self {
        HotspotParams { alpha: 0.4, k: 2 }
    }
}

impl HotspotParams {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AnalyticsError::InvalidInput(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        if self.k == 0 {
            return Err(AnalyticsError::InvalidInput("k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotspotFlag {
    pub segment: SegmentId,
    pub flagged: bool,
    /// Start of the window whose arrival raised the current flag.
    pub set_at_window_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HotspotFlags {
    pub flags: Vec<HotspotFlag>,
}

impl HotspotFlags {
    pub fn is_flagged(&self, segment: SegmentId) -> bool {
        self.flags
            .iter()
            .any(|f| f.segment == segment && f.flagged)
    }

    pub fn as_bools(&self) -> Vec<bool> {
        self.flags.iter().map(|f| f.flagged).collect()
    }
}

/// Sustained-drop rule on one series: `Some(window start)` at which the flag
/// was set when the last `k` windows are all below `alpha * free_flow`.
fn sustained_drop(windows: &[SpeedWindow], free_flow: f64, params: HotspotParams) -> Option<i64> {
    let threshold = params.alpha * free_flow;
    let run = windows
        .iter()
        .rev()
        .take_while(|w| w.mean_speed_kmh < threshold)
        .count();
    if run >= params.k {
        Some(windows[windows.len() - run + params.k - 1].start_ms)
    } else {
        None
    }
}

/// Flags every segment whose most recent `k` non-empty windows are all below
/// `alpha` times its free-flow speed. One entry per segment, in input order.
pub fn detect_hotspots(
    segments: &[RoadSegment],
    series: &BTreeMap<SegmentId, SegmentSpeedSeries>,
    params: HotspotParams,
) -> HotspotFlags {
    let flags = segments
        .iter()
        .map(|seg| {
            let s = series.get(&seg.id);
            let set = match (s, free_flow_for(seg, s)) {
                (Some(s), Some(ff)) => sustained_drop(&s.windows, ff, params),
                _ => None,
            };
            HotspotFlag {
                segment: seg.id,
                flagged: set.is_some(),
                set_at_window_ms: set,
            }
        })
        .collect();
    HotspotFlags { flags }
}

/// Flag value after each window of `series`, as an online detector with the
/// full history would have reported it.
pub fn hotspot_timeline(
    series: &SegmentSpeedSeries,
    free_flow: f64,
    params: HotspotParams,
) -> Vec<(i64, bool)> {
    (1..=series.windows.len())
        .map(|n| {
            let prefix = &series.windows[..n];
            (
                prefix[n - 1].start_ms,
                sustained_drop(prefix, free_flow, params).is_some(),
            )
        })
        .collect()
}

/// Flags readings whose value sits more than `cutoff` median absolute
/// deviations from the median of all readings.
pub fn robust_outliers(means: &[f64], cutoff: f64) -> Vec<bool> {
    let Some(median) = percentile(means, 0.5) else {
        return Vec::new();
    };
    let deviations: Vec<f64> = means.iter().map(|m| (m - median).abs()).collect();
    let mad = percentile(&deviations, 0.5).unwrap_or(0.0);
    deviations.iter().map(|d| *d > cutoff * mad).collect()
}

/// Exponentially weighted moving average of `values`, seeded with the first.
pub fn forecast_ewma(values: &[f64], lambda: f64) -> Result<f64, AnalyticsError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(AnalyticsError::InvalidInput(format!(
            "lambda {lambda} outside (0, 1]"
        )));
    }
    let (first, rest) = values.split_first().ok_or(AnalyticsError::NoData)?;
    Ok(rest
        .iter()
        .fold(*first, |s, x| lambda * x + (1.0 - lambda) * s))
}
