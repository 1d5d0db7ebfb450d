//! Inverse-distance-weighted field estimation.

use serde::{Deserialize, Serialize};

use super::geo::{haversine_km, GeoPoint, KM_PER_DEGREE};
use super::AnalyticsError;

/// Cells above this count are refused rather than allocated.
pub const MAX_GRID_CELLS: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub location: GeoPoint,
    pub value: f64,
}

impl Reading {
    pub fn new(location: GeoPoint, value: f64) -> Self {
        Reading { location, value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

impl BoundingBox {
    /// Smallest box containing every point, grown by `margin_km` on each side.
    pub fn around(points: impl IntoIterator<Item = GeoPoint>, margin_km: f64) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut bb = BoundingBox {
            south: first.latitude,
            west: first.longitude,
            north: first.latitude,
            east: first.longitude,
        };
        for p in it {
            bb.south = bb.south.min(p.latitude);
            bb.north = bb.north.max(p.latitude);
            bb.west = bb.west.min(p.longitude);
            bb.east = bb.east.max(p.longitude);
        }
        let dlat = margin_km / KM_PER_DEGREE;
        let mid = ((bb.south + bb.north) / 2.0).to_radians().cos().max(1e-6);
        let dlon = margin_km / (KM_PER_DEGREE * mid);
        Some(BoundingBox {
            south: (bb.south - dlat).max(-90.0),
            north: (bb.north + dlat).min(90.0),
            west: (bb.west - dlon).max(-180.0),
            east: (bb.east + dlon).min(180.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub point: GeoPoint,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollutionField {
    pub bbox: BoundingBox,
    pub resolution_km: f64,
    pub rows: usize,
    pub cols: usize,
    /// Row-major from the south-west corner.
    pub cells: Vec<GridCell>,
    /// Leave-one-out RMSE of the readings; `None` with a single reading.
    pub loocv_rmse: Option<f64>,
}

fn check_readings(readings: &[Reading]) -> Result<(), AnalyticsError> {
    if readings.is_empty() {
        return Err(AnalyticsError::NoData);
    }
    for (i, a) in readings.iter().enumerate() {
        if !a.value.is_finite() {
            return Err(AnalyticsError::InvalidInput(format!(
                "reading {i} has non-finite value"
            )));
        }
        for b in &readings[i + 1..] {
            if haversine_km(a.location, b.location) == 0.0 {
                return Err(AnalyticsError::DuplicateLocation(a.location));
            }
        }
    }
    Ok(())
}

/// IDW estimate at `at`. Assumes `readings` already validated.
fn estimate<'a>(at: GeoPoint, readings: impl Iterator<Item = &'a Reading>, power: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for r in readings {
        let d = haversine_km(at, r.location);
        if d == 0.0 {
            return r.value;
        }
        let w = d.powf(-power);
        num += w * r.value;
        den += w;
    }
    num / den
}

/// Interpolated value at a single point.
pub fn idw_at(at: GeoPoint, readings: &[Reading], power: f64) -> Result<f64, AnalyticsError> {
    check_readings(readings)?;
    Ok(estimate(at, readings.iter(), power))
}

/// Builds the interpolated grid over `bbox` at `resolution_km` spacing.
pub fn idw_field(
    readings: &[Reading],
    bbox: BoundingBox,
    resolution_km: f64,
    power: f64,
) -> Result<PollutionField, AnalyticsError> {
    check_readings(readings)?;
    if !(resolution_km > 0.0) || !(power > 0.0) {
        return Err(AnalyticsError::InvalidInput(
            "resolution and power must be positive".into(),
        ));
    }
    if bbox.north < bbox.south || bbox.east < bbox.west {
        return Err(AnalyticsError::InvalidInput("inverted bounding box".into()));
    }
    let dlat = resolution_km / KM_PER_DEGREE;
    let mid = ((bbox.south + bbox.north) / 2.0).to_radians().cos().max(1e-6);
    let dlon = resolution_km / (KM_PER_DEGREE * mid);
    let rows = ((bbox.north - bbox.south) / dlat).floor() as usize + 1;
    let cols = ((bbox.east - bbox.west) / dlon).floor() as usize + 1;
    if rows.saturating_mul(cols) > MAX_GRID_CELLS {
        return Err(AnalyticsError::GridTooLarge { rows, cols });
    }
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let point = GeoPoint {
                latitude: bbox.south + r as f64 * dlat,
                longitude: bbox.west + c as f64 * dlon,
            };
            cells.push(GridCell {
                point,
                value: estimate(point, readings.iter(), power),
            });
        }
    }
    let loocv_rmse = if readings.len() >= 2 {
        Some(loocv_error(readings, power)?)
    } else {
        None
    };
    Ok(PollutionField {
        bbox,
        resolution_km,
        rows,
        cols,
        cells,
        loocv_rmse,
    })
}

/// RMSE of predicting each reading from all the others.
pub fn loocv_error(readings: &[Reading], power: f64) -> Result<f64, AnalyticsError> {
    if readings.len() < 2 {
        return Err(AnalyticsError::InsufficientData {
            needed: 2,
            got: readings.len(),
        });
    }
    check_readings(readings)?;
    let sse: f64 = readings
        .iter()
        .enumerate()
        .map(|(i, held)| {
            let others = readings
                .iter()
                .enumerate()
                .filter(move |(j, _)| *j != i)
                .map(|(_, r)| r);
            let err = estimate(held.location, others, power) - held.value;
            err * err
        })
        .sum();
    Ok((sse / readings.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn bbox() -> BoundingBox {
        BoundingBox {
            south: 28.50,
            west: 77.15,
            north: 28.56,
            east: 77.22,
        }
    }

    #[test]
    fn constant_field() {
        let rs = [
            Reading::new(p(28.51, 77.16), 42.0),
            Reading::new(p(28.53, 77.20), 42.0),
            Reading::new(p(28.55, 77.18), 42.0),
        ];
        let f = idw_field(&rs, bbox(), 0.5, 2.0).unwrap();
        assert!(f.cells.iter().all(|c| (c.value - 42.0).abs() < 1e-12));
        assert!(f.loocv_rmse.unwrap() < 1e-12);
    }

    #[test]
    fn single_reading_everywhere() {
        let rs = [Reading::new(p(28.52, 77.17), 7.5)];
        let f = idw_field(&rs, bbox(), 1.0, 2.0).unwrap();
        assert!(f.cells.iter().all(|c| (c.value - 7.5).abs() < 1e-12));
        assert_eq!(f.loocv_rmse, None);
    }

    #[test]
    fn midpoint_is_average() {
        let rs = [
            Reading::new(p(0.0, -0.01), 10.0),
            Reading::new(p(0.0, 0.01), 30.0),
        ];
        let v = idw_at(p(0.0, 0.0), &rs, 2.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn empty_is_no_data() {
        assert!(matches!(
            idw_field(&[], bbox(), 0.1, 2.0),
            Err(AnalyticsError::NoData)
        ));
    }

    #[test]
    fn loocv_collinear_oracle() {
        // Hold-out predictions, evaluated by hand:
        //   drop 0:  (10*1 + 20/4) / 1.25 = 12  -> err 12
        //   drop 10: (0 + 20) / 2      = 10  -> err 0
        //   drop 20: (10*1 + 0/4) / 1.25 = 8   -> err 12
        let expected = ((144.0 + 0.0 + 144.0) / 3.0f64).sqrt();
        let rs = [
            Reading::new(p(0.0, 0.00), 0.0),
            Reading::new(p(0.0, 0.01), 10.0),
            Reading::new(p(0.0, 0.02), 20.0),
        ];
        let got = loocv_error(&rs, 2.0).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!((got - 9.797958971132712).abs() < 1e-9);
    }

    #[test]
    fn loocv_needs_two() {
        let rs = [Reading::new(p(0.0, 0.0), 1.0)];
        assert!(matches!(
            loocv_error(&rs, 2.0),
            Err(AnalyticsError::InsufficientData { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn duplicate_location_rejected() {
        let rs = [
            Reading::new(p(1.0, 1.0), 1.0),
            Reading::new(p(1.0, 1.0), 2.0),
        ];
        assert!(matches!(
            loocv_error(&rs, 2.0),
            Err(AnalyticsError::DuplicateLocation(_))
        ));
    }

    #[test]
    fn grid_size_guard() {
        let rs = [Reading::new(p(0.0, 0.0), 1.0)];
        let huge = BoundingBox {
            south: -10.0,
            west: -10.0,
            north: 10.0,
            east: 10.0,
        };
        assert!(matches!(
            idw_field(&rs, huge, 0.01, 2.0),
            Err(AnalyticsError::GridTooLarge { .. })
        ));
    }
}
