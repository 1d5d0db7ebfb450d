//! Offline analytics over a recorded trace: the same speed, forecast and
//! hotspot kernels the live policy runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::analytics::{
    detect_hotspots, forecast_ewma, free_flow_for, hotspot_timeline, read_segments, read_trace, segment_speeds,
    AnalyticsError, HotspotFlags, HotspotParams, RoadSegment, SegmentId, SegmentSpeedSeries, TraceFix,
};
use crate::controller::{read_log, QUARANTINE_FILE};
use crate::extract::gps_fixes;
use crate::policy::PolicyParams;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("{path}: {source}")]
    Input { path: String, source: AnalyticsError },
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("no data: trace has no valid vehicle fixes")]
    NoData,
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayParams {
    pub window_s: u32,
    pub snap_radius_km: f64,
    pub hotspot: HotspotParams,
    pub lambda: f64,
}

impl From<&PolicyParams> for ReplayParams {
    fn from(p: &PolicyParams) -> Self {
        ReplayParams {
            window_s: p.window_s,
            snap_radius_km: p.snap_radius_km,
            hotspot: HotspotParams { alpha: p.alpha, k: p.k },
            lambda: p.lambda,
        }
    }
}

impl Default for ReplayParams {
    fn default() -> Self {
        ReplayParams::from(&PolicyParams::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutput {
    pub series: BTreeMap<SegmentId, SegmentSpeedSeries>,
    pub flags: HotspotFlags,
    /// Flag after each window, per segment.
    pub timeline: BTreeMap<SegmentId, Vec<(i64, bool)>>,
    /// Next-window speed forecast, per segment with data.
    pub forecasts: BTreeMap<SegmentId, f64>,
}

/// Hotspot flag after each window for every segment that has data.
pub fn timelines(
    segments: &[RoadSegment],
    series: &BTreeMap<SegmentId, SegmentSpeedSeries>,
    params: HotspotParams,
) -> BTreeMap<SegmentId, Vec<(i64, bool)>> {
    segments
        .iter()
        .filter_map(|seg| {
            let s = series.get(&seg.id)?;
            let ff = free_flow_for(seg, Some(s))?;
            Some((seg.id, hotspot_timeline(s, ff, params)))
        })
        .collect()
}

pub fn replay(fixes: &[TraceFix], segments: &[RoadSegment], params: ReplayParams) -> Result<ReplayOutput, ReplayError> {
    if fixes.is_empty() {
        return Err(ReplayError::NoData);
    }
    params.hotspot.validate()?;
    let series = segment_speeds(fixes, segments, params.window_s, params.snap_radius_km)?;
    let flags = detect_hotspots(segments, &series, params.hotspot);
    let timeline = timelines(segments, &series, params.hotspot);
    let forecasts = series
        .iter()
        .filter_map(|(id, s)| Some((*id, forecast_ewma(&s.means(), params.lambda).ok()?)))
        .collect();
    Ok(ReplayOutput {
        series,
        flags,
        timeline,
        forecasts,
    })
}

pub fn replay_files(trace: &Path, segments: &Path, params: ReplayParams) -> Result<ReplayOutput, ReplayError> {
    let open = |p: &Path| fs::File::open(p).map_err(|e| ReplayError::Io(p.display().to_string(), e));
    let fixes = read_trace(open(trace)?).map_err(|source| ReplayError::Input {
        path: trace.display().to_string(),
        source,
    })?;
    let segs = read_segments(open(segments)?).map_err(|source| ReplayError::Input {
        path: segments.display().to_string(),
        source,
    })?;
    replay(&fixes, &segs, params)
}

/// GPS fixes from a controller data directory, one log per node.
pub fn trace_from_logs(dir: &Path) -> Result<Vec<TraceFix>, ReplayError> {
    let io = |e| ReplayError::Io(dir.display().to_string(), e);
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "jsonl") && p.file_name().is_some_and(|n| n != QUARANTINE_FILE)
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        let imei = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let entries: Vec<_> = read_log(&path)
            .map_err(|e| ReplayError::Io(path.display().to_string(), e))?
            .into_iter()
            .map(std::sync::Arc::new)
            .collect();
        out.extend(gps_fixes(&imei, &entries));
    }
    Ok(out)
}

impl ReplayOutput {
    /// Writes `segment_speeds.csv`, `hotspot_flags.csv`,
    /// `hotspot_timeline.csv` and `forecasts.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("segment_speeds.csv"))?;
        writeln!(f, "segment,window_start_ms,mean_speed_kmh,samples")?;
        for s in self.series.values() {
            for w in &s.windows {
                writeln!(f, "{},{},{},{}", s.segment, w.start_ms, w.mean_speed_kmh, w.samples)?;
            }
        }
        let mut f = fs::File::create(dir.join("hotspot_flags.csv"))?;
        writeln!(f, "segment,flagged,set_at_window_ms")?;
        for fl in &self.flags.flags {
            let at = fl.set_at_window_ms.map(|t| t.to_string()).unwrap_or_default();
            writeln!(f, "{},{},{}", fl.segment, fl.flagged, at)?;
        }
        write_timeline(&dir.join("hotspot_timeline.csv"), &self.timeline)?;
        let mut f = fs::File::create(dir.join("forecasts.csv"))?;
        writeln!(f, "segment,forecast_kmh")?;
        for (id, v) in &self.forecasts {
            writeln!(f, "{id},{v}")?;
        }
        Ok(())
    }
}

pub fn write_timeline(path: &Path, timeline: &BTreeMap<SegmentId, Vec<(i64, bool)>>) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "segment,window_start_ms,flagged")?;
    for (id, rows) in timeline {
        for (t, flagged) in rows {
            writeln!(f, "{id},{t},{flagged}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::GeoPoint;

    fn segment() -> RoadSegment {
        let a = GeoPoint::new(40.7, -74.0).unwrap();
        RoadSegment::new(1, a, a.offset_km(30.0, 0.0), Some(20.0)).unwrap()
    }

    /// One fix every 10 s along the segment at `speed(t_s)` km/h.
    fn drive(speed: impl Fn(i64) -> f64, secs: i64) -> Vec<TraceFix> {
        let seg = segment();
        let mut d = 0.0;
        let mut out = Vec::new();
        for t in (0..secs).step_by(10) {
            let frac = d / seg.length_km;
            out.push(TraceFix {
                vehicle_id: "bus".into(),
                timestamp_ms: 1_699_999_800_000 + t * 1000,
                position: crate::analytics::lerp(seg.start, seg.end, frac),
            });
            d += speed(t) * 10.0 / 3600.0;
        }
        out
    }

    #[test]
    fn constant_speed_windows() {
        let out = replay(&drive(|_| 20.0, 3600), &[segment()], ReplayParams::default()).unwrap();
        let s = &out.series[&1];
        assert_eq!(s.windows.len(), 6);
        for w in &s.windows {
            assert!((w.mean_speed_kmh - 20.0).abs() < 1e-6, "{w:?}");
        }
        assert!(!out.flags.is_flagged(1));
    }

    #[test]
    fn collapse_is_flagged_in_collapse_windows() {
        let speed = |t: i64| if (1800..3600).contains(&t) { 4.0 } else { 20.0 };
        let out = replay(&drive(speed, 4800), &[segment()], ReplayParams::default()).unwrap();
        let flags: Vec<bool> = out.timeline[&1].iter().map(|r| r.1).collect();
        // windows 3..=5 are slow; k = 2 flags from the second of them
        assert_eq!(flags, [false, false, false, false, true, true, false, false]);
    }

    #[test]
    fn empty_trace_is_no_data() {
        assert!(matches!(
            replay(&[], &[segment()], ReplayParams::default()),
            Err(ReplayError::NoData)
        ));
    }
}
