use std::collections::BTreeMap;

use super::{Decision, DirtDetector, Policy, PolicyContext, PolicyError};
use crate::command::Directive;
use crate::extract::latest_image;

/// Photographs the street periodically and starts the auxiliary sensors on
/// nodes whose camera sees more dirt than the threshold.
pub struct CleanlinessPolicy {
    detector: Box<dyn DirtDetector>,
    /// Last score per node, keyed by the image's receive time.
    scores: BTreeMap<String, (i64, f64)>,
}

impl CleanlinessPolicy {
    pub fn new(detector: Box<dyn DirtDetector>) -> Self {
        CleanlinessPolicy {
            detector,
            scores: BTreeMap::new(),
        }
    }
}

impl Policy for CleanlinessPolicy {
    fn name(&self) -> &str {
        "cleanliness"
    }

    fn tick(&mut self, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError> {
        let p = ctx.params;
        let since = ctx.now_ms - i64::from(p.image_period_s) * 1000;
        let mut directives = BTreeMap::new();
        for node in ctx.snapshot.alive() {
            let prev = ctx.previous.directive(&node.imei).cloned().unwrap_or_default();
            let image = ctx
                .snapshot
                .recent
                .get(&node.imei)
                .and_then(|entries| latest_image(entries, since));
            let Some((received_at, img)) = image else {
                directives.insert(node.imei.clone(), prev.with_capture(true));
                continue;
            };
            let score = match self.scores.get(&node.imei) {
                Some(&(at, s)) if at == received_at => Ok(s),
                _ => img
                    .image_bytes()
                    .map_err(|e| e.to_string())
                    .and_then(|bytes| self.detector.dirt_fraction(&bytes).map_err(|e| e.to_string())),
            };
            let directive = match score {
                Ok(dirt) => {
                    self.scores.insert(node.imei.clone(), (received_at, dirt));
                    if dirt > p.dirt_threshold {
                        let aux: Vec<String> = p
                            .aux_sensors
                            .iter()
                            .filter(|s| node.sensors.contains(s))
                            .cloned()
                            .collect();
                        Directive::active(ctx.table.defaults_for(&aux))
                    } else {
                        prev.with_capture(false)
                    }
                }
                Err(e) => {
                    tracing::error!(imei = %node.imei, error = %e, "dirt detector failed");
                    prev
                }
            };
            directives.insert(node.imei.clone(), directive);
        }
        Ok(Decision::new(directives))
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::analytics::GeoPoint;
    use crate::command::{SensingPolicy, SensorTable};
    use crate::controller::{NodeRecord, SessionState, Snapshot, StoredEntry};
    use crate::policy::{DetectorError, PolicyParams};
    use crate::wire::ImageDataMsg;

    struct Fixed(Result<f64, ()>);

    impl DirtDetector for Fixed {
        fn dirt_fraction(&self, _: &[u8]) -> Result<f64, DetectorError> {
            self.0.map_err(|_| DetectorError::Empty)
        }
    }

    fn snapshot(image_at: Option<i64>, now: i64) -> Snapshot {
        let node = NodeRecord {
            imei: "cam".into(),
            last_addr: "sim".into(),
            reported_ip: "sim".into(),
            registered_ms: 0,
            last_seen_ms: now,
            battery: 90,
            location: GeoPoint::new(28.6, 77.2).unwrap(),
            sensors: vec!["AirQuality".into(), "Humidity".into(), "GPS".into()],
            session: SessionState::Idle { since_ms: 0 },
            alive: true,
        };
        let recent = image_at
            .map(|t| {
                vec![Arc::new(StoredEntry {
                    received_at_ms: t,
                    message: ImageDataMsg {
                        imei: "cam".into(),
                        latitude: 28.6,
                        longitude: 77.2,
                        encoded_image_string: "AAAA".into(),
                    }
                    .into(),
                })]
            })
            .unwrap_or_default();
        Snapshot {
            taken_at_ms: now,
            nodes: [("cam".to_string(), Arc::new(node))].into(),
            recent: [("cam".to_string(), recent)].into(),
        }
    }

    fn tick(policy: &mut CleanlinessPolicy, snap: &Snapshot, prev: &SensingPolicy) -> Directive {
        let params = PolicyParams::default();
        let table = SensorTable::default();
        let d = policy
            .tick(&PolicyContext {
                snapshot: snap,
                table: &table,
                params: &params,
                previous: prev,
                now_ms: snap.taken_at_ms,
            })
            .unwrap();
        d.directives["cam"].clone()
    }

    #[test]
    fn dirty_image_starts_aux_sensors() {
        let mut p = CleanlinessPolicy::new(Box::new(Fixed(Ok(0.5))));
        let d = tick(&mut p, &snapshot(Some(1_000), 2_000), &SensingPolicy::default());
        assert!(d.active);
        let names: Vec<&str> = d.sensors.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["AirQuality", "Humidity"]);
        assert!(!d.capture_image);
    }

    #[test]
    fn clean_image_leaves_directive() {
        let mut p = CleanlinessPolicy::new(Box::new(Fixed(Ok(0.0))));
        let d = tick(&mut p, &snapshot(Some(1_000), 2_000), &SensingPolicy::default());
        assert_eq!(d, Directive::inactive());
    }

    #[test]
    fn no_recent_image_requests_capture() {
        let mut p = CleanlinessPolicy::new(Box::new(Fixed(Ok(0.0))));
        let d = tick(&mut p, &snapshot(None, 2_000), &SensingPolicy::default());
        assert!(d.capture_image);
        let stale = tick(&mut p, &snapshot(Some(0), 301_000), &SensingPolicy::default());
        assert!(stale.capture_image);
    }

    #[test]
    fn detector_failure_keeps_previous() {
        let mut p = CleanlinessPolicy::new(Box::new(Fixed(Err(()))));
        let prev = SensingPolicy {
            policy_id: 4,
            directives: [(
                "cam".to_string(),
                Directive::active(vec![]).with_capture(true),
            )]
            .into(),
        };
        let d = tick(&mut p, &snapshot(Some(1_000), 2_000), &prev);
        assert_eq!(d, prev.directives["cam"]);
    }
}
