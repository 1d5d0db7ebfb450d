use std::collections::BTreeMap;

use super::{Decision, FrequencyBounds, Policy, PolicyContext, PolicyError};
use crate::analytics::{
    detect_hotspots, forecast_ewma, free_flow_for, map_to_segment, segment_speeds, HotspotParams, RoadSegment,
};
use crate::command::Directive;
use crate::extract::all_gps_fixes;
use crate::wire::SensorFrequency;

/// Samples faster where traffic slows and fires the camera in jams.
#[derive(Debug, Clone)]
pub struct HotspotPolicy {
    segments: Vec<RoadSegment>,
}

impl HotspotPolicy {
    pub fn new(segments: Vec<RoadSegment>) -> Result<Self, PolicyError> {
        if segments.is_empty() {
            return Err(PolicyError::Config("hotspot policy needs a segment table".into()));
        }
        Ok(HotspotPolicy { segments })
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }
}

/// Sensing frequency for forecast speed `speed` on a road with free-flow
/// speed `free_flow`: `f_min` at free flow, rising linearly to `f_max` at a
/// standstill. Rounded to 0.01 Hz so small forecast jitter does not restart
/// sessions.
pub fn hotspot_frequency(speed: f64, free_flow: f64, bounds: FrequencyBounds) -> f64 {
    let FrequencyBounds { f_min, f_max } = bounds;
    let congestion = (1.0 - speed / free_flow).max(0.0);
    let f = (f_min + (f_max - f_min) * congestion).clamp(f_min, f_max);
    ((f * 100.0).round() / 100.0).clamp(f_min, f_max)
}

impl Policy for HotspotPolicy {
    fn name(&self) -> &str {
        "hotspot"
    }

    fn tick(&mut self, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError> {
        let p = ctx.params;
        let sensor = p.hotspot_sensor.as_str();
        let bounds = p
            .bounds(sensor)
            .ok_or_else(|| PolicyError::Config(format!("no frequency_bounds for `{sensor}`")))?;
        let params = HotspotParams { alpha: p.alpha, k: p.k };

        let fixes = all_gps_fixes(&ctx.snapshot.recent);
        let series = segment_speeds(&fixes, &self.segments, p.window_s, p.snap_radius_km)
            .map_err(|e| PolicyError::Tick(e.to_string()))?;
        let flags = detect_hotspots(&self.segments, &series, params);

        let mut directives = BTreeMap::new();
        for node in ctx.snapshot.alive() {
            let seg = map_to_segment(node.location, &self.segments, p.snap_radius_km)
                .and_then(|id| self.segments.iter().find(|s| s.id == id));
            let mut capture = false;
            let mut active = true;
            let freq = match seg {
                None => bounds.f_min,
                Some(seg) => {
                    let s = series.get(&seg.id);
                    let ff = free_flow_for(seg, s);
                    let means = s.map(|s| s.means()).unwrap_or_default();
                    match (ff, forecast_ewma(&means, p.lambda)) {
                        (Some(ff), Ok(forecast)) => {
                            let latest = means.last().copied().unwrap_or(forecast);
                            capture = forecast.min(latest) < p.camera_speed_fraction * ff;
                            if flags.is_flagged(seg.id) {
                                bounds.f_max
                            } else {
                                if p.deactivate_free_flow && forecast >= ff {
                                    active = false;
                                }
                                hotspot_frequency(forecast, ff, bounds)
                            }
                        }
                        // no speed estimate yet: sample as fast as allowed
                        _ => bounds.f_max,
                    }
                }
            };
            let directive = if active {
                Directive::active(vec![SensorFrequency::new(sensor, freq)]).with_capture(capture)
            } else {
                Directive::inactive()
            };
            directives.insert(node.imei.clone(), directive);
        }
        Ok(Decision {
            directives,
            hotspots: Some(flags),
            loocv_rmse: None,
        })
    }
}
