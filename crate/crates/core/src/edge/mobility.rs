use crate::analytics::{haversine_km, lerp, GeoPoint, TraceFix};

/// How a node moves, as a function of time since scenario start.
#[derive(Debug, Clone, PartialEq)]
pub enum Mobility {
    /// Piecewise-linear between timestamped points; holds the end points
    /// outside their range.
    Waypoints(Vec<(i64, GeoPoint)>),
    /// Drives along a polyline with a piecewise-constant speed schedule.
    Route {
        path: Vec<GeoPoint>,
        /// `(offset_ms, km/h)` in increasing offset order, first at 0.
        speeds: Vec<(i64, f64)>,
        /// Turn around at either end instead of stopping.
        shuttle: bool,
    },
}

impl Mobility {
    pub fn fixed(at: GeoPoint) -> Self {
        Mobility::Waypoints(vec![(0, at)])
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Mobility::Waypoints(w) => {
                if w.is_empty() {
                    return Err("waypoint list is empty".into());
                }
                if w.windows(2).any(|p| p[1].0 < p[0].0) {
                    return Err("waypoint times must be non-decreasing".into());
                }
            }
            Mobility::Route { path, speeds, .. } => {
                if path.len() < 2 {
                    return Err("route needs at least two points".into());
                }
                if speeds.first().map(|s| s.0) != Some(0) {
                    return Err("route speed schedule must start at t = 0".into());
                }
                if speeds.windows(2).any(|p| p[1].0 <= p[0].0) {
                    return Err("route speed times must be increasing".into());
                }
                if speeds.iter().any(|s| !(s.1 >= 0.0 && s.1.is_finite())) {
                    return Err("route speeds must be >= 0".into());
                }
            }
        }
        Ok(())
    }

    /// Builds waypoints from trace fixes of one vehicle, relative to `start_ms`.
    pub fn from_trace(fixes: &[TraceFix], vehicle: &str, start_ms: i64) -> Result<Self, String> {
        let mut points: Vec<(i64, GeoPoint)> = fixes
            .iter()
            .filter(|f| f.vehicle_id == vehicle)
            .map(|f| (f.timestamp_ms - start_ms, f.position))
            .collect();
        if points.is_empty() {
            return Err(format!("trace has no fixes for vehicle `{vehicle}`"));
        }
        points.sort_by_key(|p| p.0);
        Ok(Mobility::Waypoints(points))
    }

    pub fn position_at(&self, offset_ms: i64) -> GeoPoint {
        match self {
            Mobility::Waypoints(w) => waypoint_position(w, offset_ms),
            Mobility::Route {
                path,
                speeds,
                shuttle,
            } => {
                let d = distance_travelled_km(speeds, offset_ms);
                point_along(path, d, *shuttle)
            }
        }
    }
}

fn waypoint_position(w: &[(i64, GeoPoint)], t: i64) -> GeoPoint {
    let i = w.partition_point(|p| p.0 <= t);
    if i == 0 {
        return w[0].1;
    }
    if i == w.len() {
        return w[w.len() - 1].1;
    }
    let (t0, a) = w[i - 1];
    let (t1, b) = w[i];
    if t1 == t0 {
        return b;
    }
    lerp(a, b, (t - t0) as f64 / (t1 - t0) as f64)
}

fn distance_travelled_km(speeds: &[(i64, f64)], t: i64) -> f64 {
    let mut d = 0.0;
    for (i, &(from, kmh)) in speeds.iter().enumerate() {
        if from >= t {
            break;
        }
        let to = speeds.get(i + 1).map_or(t, |s| s.0.min(t));
        d += kmh * (to - from) as f64 / 3_600_000.0;
    }
    d
}

fn point_along(path: &[GeoPoint], d: f64, shuttle: bool) -> GeoPoint {
    let legs: Vec<f64> = path.windows(2).map(|p| haversine_km(p[0], p[1])).collect();
    let total: f64 = legs.iter().sum();
    if total <= 0.0 {
        return path[0];
    }
    let mut d = if shuttle {
        let m = d.rem_euclid(2.0 * total);
        if m > total {
            2.0 * total - m
        } else {
            m
        }
    } else {
        d.min(total)
    };
    for (i, &len) in legs.iter().enumerate() {
        if d <= len {
            return if len > 0.0 {
                lerp(path[i], path[i + 1], d / len)
            } else {
                path[i]
            };
        }
        d -= len;
    }
    path[path.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn waypoints_interpolate_and_clamp() {
        let m = Mobility::Waypoints(vec![(0, p(0.0, 0.0)), (10_000, p(1.0, 2.0))]);
        assert_eq!(m.position_at(-5), p(0.0, 0.0));
        assert_eq!(m.position_at(5_000), p(0.5, 1.0));
        assert_eq!(m.position_at(99_000), p(1.0, 2.0));
    }

    #[test]
    fn route_speed_schedule() {
        let a = p(40.0, -74.0);
        let b = a.offset_km(10.0, 0.0);
        let m = Mobility::Route {
            path: vec![a, b],
            speeds: vec![(0, 20.0), (1_800_000, 4.0)],
            shuttle: false,
        };
        // 10 km after 30 min at 20 km/h, then 2 km more in the next 30 min
        let at = |t| haversine_km(a, m.position_at(t));
        assert!((at(1_800_000) - 10.0).abs() < 1e-6);
        let m = Mobility::Route {
            path: vec![a, a.offset_km(30.0, 0.0)],
            speeds: vec![(0, 20.0), (1_800_000, 4.0)],
            shuttle: false,
        };
        let at = |t| haversine_km(a, m.position_at(t));
        assert!((at(3_600_000) - 12.0).abs() < 1e-6);
    }

    #[test]
    fn shuttle_turns_around() {
        let a = p(40.0, -74.0);
        let m = Mobility::Route {
            path: vec![a, a.offset_km(1.0, 0.0)],
            speeds: vec![(0, 1.0)],
            shuttle: true,
        };
        // 1.5 km travelled on a 1 km line: 0.5 km from the start on the way back
        let d = haversine_km(a, m.position_at(5_400_000));
        assert!((d - 0.5).abs() < 1e-6, "{d}");
    }

    #[test]
    fn validation() {
        assert!(Mobility::Waypoints(vec![]).validate().is_err());
        assert!(Mobility::Waypoints(vec![(5, p(0.0, 0.0)), (1, p(0.0, 0.0))]).validate().is_err());
        let bad = Mobility::Route {
            path: vec![p(0.0, 0.0), p(0.0, 1.0)],
            speeds: vec![(10, 5.0)],
            shuttle: false,
        };
        assert!(bad.validate().is_err());
    }
}
