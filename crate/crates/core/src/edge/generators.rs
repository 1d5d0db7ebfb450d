//! Synthetic sensor readings and camera frames.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analytics::{haversine_km, GeoPoint};
use crate::command::{ACCELEROMETER, AIR_QUALITY, COMPASS, DUST, GPS, HUMIDITY};
use crate::wire::SensorRecord;

/// Documented size of one air-quality record on the wire. Daily volume at
/// 1 Hz is about this times 86 400.
pub const AIR_QUALITY_RECORD_BYTES: u32 = 350;

/// Gaussian bump added to the background level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PollutionSource {
    pub latitude: f64,
    pub longitude: f64,
    pub amplitude: f64,
    pub radius_km: f64,
}

/// Ground-truth pollution field sampled by air-quality sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AirQualityField {
    /// µg/m³.
    pub base: f64,
    pub noise_sd: f64,
    pub sources: Vec<PollutionSource>,
}

impl Default for AirQualityField {
    fn default() -> Self {
        AirQualityField {
            base: 60.0,
            noise_sd: 4.0,
            sources: Vec::new(),
        }
    }
}

impl AirQualityField {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(format!("air_quality.noise_sd must be >= 0, got {}", self.noise_sd));
        }
        if self.sources.iter().any(|s| !(s.radius_km > 0.0)) {
            return Err("air_quality source radius_km must be > 0".into());
        }
        Ok(())
    }

    /// Noise-free field value at `p`.
    pub fn value_at(&self, p: GeoPoint) -> f64 {
        self.base
            + self
                .sources
                .iter()
                .map(|s| {
                    let c = GeoPoint {
                        latitude: s.latitude,
                        longitude: s.longitude,
                    };
                    let d = haversine_km(p, c) / s.radius_km;
                    s.amplitude * (-d * d).exp()
                })
                .sum::<f64>()
    }
}

/// Accelerometer waveform: a sinusoid on x/y over gravity on z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Waveform {
    /// m/s².
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub noise_sd: f64,
}

impl Default for Waveform {
    fn default() -> Self {
        Waveform {
            amplitude: 0.8,
            frequency_hz: 1.5,
            noise_sd: 0.05,
        }
    }
}

/// Everything generators read besides the node itself.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Environment {
    pub air_quality: AirQualityField,
    pub accelerometer: Waveform,
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let m = 10f64.powi(decimals);
    (v * m).round() / m
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    if sd <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).map(|n| n.sample(rng)).unwrap_or(0.0)
}

fn record(unit: &str, name: &str, t_ms: i64, values: Value) -> SensorRecord {
    let values = match values {
        Value::Object(m) => m.into_iter().collect(),
        _ => BTreeMap::new(),
    };
    SensorRecord {
        measurement_unit: unit.into(),
        name: name.into(),
        timestamp: Some(t_ms),
        values,
    }
}

/// Where the node is and which way it heads when a sample is taken.
#[derive(Debug, Clone, Copy)]
pub struct SampleAt<'a> {
    pub t_ms: i64,
    pub position: GeoPoint,
    pub imei: &'a str,
}

/// One reading of `sensor`. Unknown sensors yield a plain noisy `value`.
pub fn sample<R: Rng + ?Sized>(sensor: &str, at: SampleAt<'_>, env: &Environment, rng: &mut R) -> SensorRecord {
    let t = at.t_ms;
    let secs = t as f64 / 1000.0;
    match sensor {
        AIR_QUALITY => {
            let v = (env.air_quality.value_at(at.position) + gauss(rng, env.air_quality.noise_sd)).max(0.0);
            // AirBeam-style record, padded with the metadata such devices send
            let tail: String = at.imei.chars().rev().take(6).collect();
            record(
                "µg/m³",
                AIR_QUALITY,
                t,
                json!({
                    "value": round_to(v, 2),
                    "measurementType": "Particulate Matter",
                    "sensorName": "AirBeam2-PM2.5",
                    "sensorPackageName": format!("AirBeam2:00189610{tail:0>6}"),
                    "thresholdVeryLow": 0,
                    "thresholdLow": 12,
                    "thresholdMedium": 35,
                    "thresholdHigh": 55,
                    "thresholdVeryHigh": 150,
                    "latitude": round_to(at.position.latitude, 6),
                    "longitude": round_to(at.position.longitude, 6),
                }),
            )
        }
        GPS => record(
            "degrees",
            GPS,
            t,
            json!({
                "latitude": at.position.latitude,
                "longitude": at.position.longitude,
                "accuracy": 5.0,
            }),
        ),
        ACCELEROMETER => {
            let w = env.accelerometer;
            let phase = TAU * w.frequency_hz * secs;
            record(
                "m/s²",
                ACCELEROMETER,
                t,
                json!({
                    "x": round_to(w.amplitude * phase.sin() + gauss(rng, w.noise_sd), 4),
                    "y": round_to(0.5 * w.amplitude * phase.cos() + gauss(rng, w.noise_sd), 4),
                    "z": round_to(9.81 + gauss(rng, w.noise_sd), 4),
                }),
            )
        }
        COMPASS => {
            let heading = (secs / 60.0 * 7.0 + gauss(rng, 2.0)).rem_euclid(360.0);
            record("degrees", COMPASS, t, json!({ "value": round_to(heading, 2) }))
        }
        HUMIDITY => {
            let day = TAU * secs / 86_400.0;
            let v = (55.0 + 15.0 * day.sin() + gauss(rng, 1.0)).clamp(0.0, 100.0);
            record("%", HUMIDITY, t, json!({ "value": round_to(v, 2) }))
        }
        DUST => {
            let v = (0.6 * env.air_quality.value_at(at.position) + gauss(rng, env.air_quality.noise_sd)).max(0.0);
            record("µg/m³", DUST, t, json!({ "value": round_to(v, 2) }))
        }
        other => record("", other, t, json!({ "value": round_to(gauss(rng, 1.0), 4) })),
    }
}

pub const IMAGE_WIDTH: u32 = 64;
pub const IMAGE_HEIGHT: u32 = 48;

/// Grey street scene as PNG. A `dirt` fraction of pixels is near-black litter
/// on a mid-grey background.
pub fn street_image<R: Rng + ?Sized>(dirt: f64, rng: &mut R) -> Vec<u8> {
    let dirt = dirt.clamp(0.0, 1.0);
    let mut img = GrayImage::new(IMAGE_WIDTH, IMAGE_HEIGHT);
    for px in img.pixels_mut() {
        let v = if rng.random::<f64>() < dirt {
            rng.random_range(5..30)
        } else {
            rng.random_range(118..138)
        };
        *px = Luma([v]);
    }
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn at(t_ms: i64) -> SampleAt<'static> {
        SampleAt {
            t_ms,
            position: GeoPoint::new(28.5449, 77.1926).unwrap(),
            imei: "358240051111110",
        }
    }

    #[test]
    fn air_quality_record_is_about_documented_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let env = Environment::default();
        let n = 200;
        let total: usize = (0..n)
            .map(|i| serde_json::to_vec(&sample(AIR_QUALITY, at(1_700_000_000_000 + i * 1000), &env, &mut rng)).unwrap().len())
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - AIR_QUALITY_RECORD_BYTES as f64).abs() < 20.0, "{mean}");
    }

    #[test]
    fn gps_reports_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = sample(GPS, at(5), &Environment::default(), &mut rng);
        assert_eq!(r.value_f64("latitude"), Some(28.5449));
        assert_eq!(r.timestamp, Some(5));
    }

    #[test]
    fn field_peaks_at_source() {
        let f = AirQualityField {
            base: 10.0,
            noise_sd: 0.0,
            sources: vec![PollutionSource {
                latitude: 28.5,
                longitude: 77.2,
                amplitude: 100.0,
                radius_km: 1.0,
            }],
        };
        let c = GeoPoint::new(28.5, 77.2).unwrap();
        assert!((f.value_at(c) - 110.0).abs() < 1e-9);
        assert!(f.value_at(c.offset_km(1.0, 0.0)) < 50.0);
    }

    #[test]
    fn image_is_png() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let png = street_image(0.2, &mut rng);
        let img = image::load_from_memory(&png).unwrap();
        assert_eq!((img.width(), img.height()), (IMAGE_WIDTH, IMAGE_HEIGHT));
    }
}
