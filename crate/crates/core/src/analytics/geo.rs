use serde::{Deserialize, Serialize};

use super::AnalyticsError;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Kilometres per degree of latitude on the reference sphere.
pub const KM_PER_DEGREE: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

/// WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub latitude: f64,
    pub longitude: f64,
}

impl GeoPoint {
    pub fn new(latitude: f64, longitude: f64) -> Result<Self, AnalyticsError> {
        if !latitude.is_finite() || !(-90.0..=90.0).contains(&latitude) {
            return Err(AnalyticsError::InvalidPoint(format!(
                "latitude {latitude} outside [-90, 90]"
            )));
        }
        if !longitude.is_finite() || !(-180.0..=180.0).contains(&longitude) {
            return Err(AnalyticsError::InvalidPoint(format!(
                "longitude {longitude} outside [-180, 180]"
            )));
        }
        Ok(GeoPoint {
            latitude,
            longitude,
        })
    }

    /// Point `km` north and `km` east of `self` on a local flat approximation.
    pub fn offset_km(&self, north_km: f64, east_km: f64) -> GeoPoint {
        let lat = self.latitude + north_km / KM_PER_DEGREE;
        let lon = self.longitude + east_km / (KM_PER_DEGREE * self.latitude.to_radians().cos());
        GeoPoint {
            latitude: lat,
            longitude: lon,
        }
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.latitude.to_radians();
    let phi2 = b.latitude.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (b.longitude - a.longitude).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Initial bearing from `a` to `b` in radians.
pub(crate) fn bearing_rad(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.latitude.to_radians();
    let phi2 = b.latitude.to_radians();
    let dlambda = (b.longitude - a.longitude).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    y.atan2(x)
}

/// Distance from `p` to the great-circle arc between `start` and `end`.
pub fn distance_to_arc_km(p: GeoPoint, start: GeoPoint, end: GeoPoint) -> f64 {
    let d_start = haversine_km(start, p);
    let length = haversine_km(start, end);
    if length == 0.0 || d_start == 0.0 {
        return d_start;
    }
    let delta13 = d_start / EARTH_RADIUS_KM;
    let theta = bearing_rad(start, p) - bearing_rad(start, end);
    if theta.cos() < 0.0 {
        return d_start;
    }
    let xt = (delta13.sin() * theta.sin()).clamp(-1.0, 1.0).asin();
    let along = (delta13.cos() / xt.cos()).clamp(-1.0, 1.0).acos() * EARTH_RADIUS_KM;
    if along > length {
        return haversine_km(end, p);
    }
    xt.abs() * EARTH_RADIUS_KM
}

/// Linear interpolation in latitude/longitude.
pub fn lerp(a: GeoPoint, b: GeoPoint, t: f64) -> GeoPoint {
    GeoPoint {
        latitude: a.latitude + (b.latitude - a.latitude) * t,
        longitude: a.longitude + (b.longitude - a.longitude) * t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn identity_is_zero() {
        let a = p(28.5472, 77.1928);
        assert_eq!(haversine_km(a, a), 0.0);
    }

    #[test]
    fn half_circumference() {
        // pi * R
        let d = haversine_km(p(0.0, 0.0), p(0.0, 180.0));
        assert!((d - 20015.086796020572).abs() < 1e-6, "{d}");
    }

    #[test]
    fn delhi_pair_matches_reference() {
        // Frozen from an atan2-form great-circle reference.
        let d = haversine_km(p(28.5472, 77.1928), p(28.5449, 77.2001));
        assert!((d - 0.7575220599509939).abs() / d < 1e-9, "{d}");
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(GeoPoint::new(90.5, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn arc_distance_cases() {
        let s = p(0.0, 0.0);
        let e = p(0.0, 0.01);
        // On the arc.
        assert!(distance_to_arc_km(p(0.0, 0.005), s, e) < 1e-9);
        // Abeam the middle.
        let off = p(0.001, 0.005);
        let d = distance_to_arc_km(off, s, e);
        assert!((d - 0.001 * KM_PER_DEGREE).abs() < 1e-6, "{d}");
        // Beyond the end.
        let beyond = p(0.0, 0.02);
        assert!((distance_to_arc_km(beyond, s, e) - haversine_km(beyond, e)).abs() < 1e-9);
        // Before the start.
        let before = p(0.0, -0.01);
        assert!((distance_to_arc_km(before, s, e) - haversine_km(before, s)).abs() < 1e-9);
    }

    #[test]
    fn offset_is_roughly_metric() {
        let a = p(28.5, 77.2);
        let b = a.offset_km(0.3, 0.4);
        assert!((haversine_km(a, b) - 0.5).abs() < 1e-3);
    }
}
