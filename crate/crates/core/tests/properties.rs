use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use music_core::analytics::{
    detect_hotspots, haversine_km, idw_at, GeoPoint, HotspotParams, Reading, RoadSegment, SegmentSpeedSeries,
    SpeedWindow,
};
use music_core::command::{CycleTiming, Directive, Scheduler, SensingPolicy, SensorTable};
use music_core::controller::{NodeRecord, SessionState, Snapshot};
use music_core::policy::{coverage_violations, Policy, PolicyContext, PolicyParams, SpatialCoveragePolicy};
use music_core::wire::{self, CommandMsg, Deframer, Message, SensorFrequency};

mod strategies {
    include!("strategies.rs");
}

fn point() -> impl Strategy<Value = GeoPoint> {
    (-85.0..85.0f64, -179.0..179.0f64).prop_map(|(a, b)| GeoPoint::new(a, b).unwrap())
}

fn near(center: GeoPoint, km: f64) -> impl Strategy<Value = GeoPoint> {
    (-km..km, -km..km).prop_map(move |(n, e)| center.offset_km(n, e))
}

fn node(imei: String, battery: u8, location: GeoPoint, session: SessionState) -> NodeRecord {
    NodeRecord {
        imei,
        last_addr: "sim".into(),
        reported_ip: "sim".into(),
        registered_ms: 0,
        last_seen_ms: 0,
        battery,
        location,
        sensors: vec!["AirQuality".into(), "GPS".into()],
        session,
        alive: true,
    }
}

fn snapshot(at: i64, nodes: Vec<NodeRecord>) -> Snapshot {
    Snapshot {
        taken_at_ms: at,
        nodes: nodes.into_iter().map(|n| (n.imei.clone(), Arc::new(n))).collect(),
        recent: BTreeMap::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn wire_round_trip(msg in strategies::message()) {
        let frame = wire::encode(&msg).unwrap();
        prop_assert_eq!(*frame.last().unwrap(), b'\n');
        prop_assert_eq!(wire::decode(&frame).unwrap(), msg);
    }

    #[test]
    fn deframing_ignores_chunk_boundaries(
        msgs in proptest::collection::vec(strategies::message(), 1..6),
        cuts in proptest::collection::vec(any::<prop::sample::Index>(), 0..10),
    ) {
        let frames: Vec<Vec<u8>> = msgs.iter().map(|m| wire::encode(m).unwrap()).collect();
        let stream = frames.concat();
        let mut at: Vec<usize> = cuts.iter().map(|i| i.index(stream.len() + 1)).collect();
        at.push(0);
        at.push(stream.len());
        at.sort_unstable();
        let mut d = Deframer::new();
        let mut out = Vec::new();
        for w in at.windows(2) {
            out.extend(d.push(&stream[w[0]..w[1]]).unwrap());
        }
        prop_assert!(d.carry().is_empty());
        prop_assert_eq!(out, frames);
    }

    #[test]
    fn session_machine_only_accepts_the_cycle(cmds in proptest::collection::vec(strategies::command(), 0..40)) {
        let mut s = SessionState::Idle { since_ms: 0 };
        for (i, cmd) in cmds.iter().enumerate() {
            let t = i as i64 * 1000;
            match s.on_command(cmd, t) {
                Ok(next) => {
                    match (cmd, &s) {
                        (CommandMsg::Start { .. }, st) => prop_assert!(st.is_idle()),
                        (CommandMsg::Stop, st) => prop_assert!(st.is_recording()),
                        (CommandMsg::Send { .. }, SessionState::AwaitingSend { .. }) => {}
                        (CommandMsg::Send { .. }, st) => prop_assert!(false, "SEND accepted while {}", st.name()),
                        (CommandMsg::CaptureImage, st) => prop_assert_eq!(&next, st),
                    }
                    s = next;
                }
                Err(_) => prop_assert!(!matches!(cmd, CommandMsg::CaptureImage)),
            }
            if let Some(idle) = s.on_upload_complete(t) {
                let closed = matches!(s, SessionState::AwaitingSend { send_issued: true, .. });
                prop_assert!(closed);
                s = idle;
            }
        }
    }

    /// Whatever sequence of policies is applied, the scheduler only emits
    /// commands the node's session accepts.
    #[test]
    fn scheduler_never_emits_an_invalid_transition(
        policies in proptest::collection::vec(
            proptest::collection::vec((any::<bool>(), 0.1..30.0f64, any::<bool>()), 3),
            1..12,
        ),
        steps in 1usize..8,
        upload_lag in 0usize..3,
    ) {
        let mut sched = Scheduler::new(SensorTable::default(), CycleTiming { sense_ms: 4_000, break_ms: 2_000 });
        let base = GeoPoint::new(28.5, 77.2).unwrap();
        let mut nodes: Vec<NodeRecord> = (0..3)
            .map(|i| node(format!("n{i}"), 80, base, SessionState::Idle { since_ms: 0 }))
            .collect();
        let mut pending_upload = vec![None::<usize>; 3];
        let mut t = 0i64;
        let mut tick = 0usize;
        for (id, spec) in policies.iter().enumerate() {
            let directives = spec
                .iter()
                .enumerate()
                .map(|(i, &(active, f, capture))| {
                    let d = if active {
                        Directive::active(vec![SensorFrequency::new("AirQuality", f)]).with_capture(capture)
                    } else {
                        Directive::inactive()
                    };
                    (format!("n{i}"), d)
                })
                .collect();
            let next = SensingPolicy { policy_id: id as u64 + 1, directives };
            sched.apply(next, &snapshot(t, nodes.clone())).unwrap();
            for _ in 0..steps {
                t += 1000;
                tick += 1;
                for (i, n) in nodes.iter_mut().enumerate() {
                    if pending_upload[i].is_some_and(|due| tick >= due) {
                        if let Some(idle) = n.session.on_upload_complete(t) {
                            n.session = idle;
                        }
                        pending_upload[i] = None;
                    }
                    for _ in 0..8 {
                        let Some(p) = sched.next_command(n, t) else { break };
                        let next = n.session.on_command(&p.cmd, t);
                        prop_assert!(next.is_ok(), "{:?} while {:?}", p.cmd, n.session);
                        n.session = next.unwrap();
                        sched.acknowledge(&n.imei, &p);
                        if matches!(p.cmd, CommandMsg::Send { .. }) {
                            pending_upload[i] = Some(tick + upload_lag);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn haversine_is_a_metric(a in point(), b in point(), c in point()) {
        let ab = haversine_km(a, b);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - haversine_km(b, a)).abs() <= 1e-9 * (1.0 + ab));
        prop_assert_eq!(haversine_km(a, a), 0.0);
        prop_assert!(haversine_km(a, c) <= ab + haversine_km(b, c) + 1e-6);
    }

    #[test]
    fn idw_stays_within_the_readings(
        center in point(),
        spots in proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -100.0..400.0f64), 1..8),
        probe in (-4.0..4.0f64, -4.0..4.0f64),
        power in 0.5..4.0f64,
    ) {
        let mut readings: Vec<Reading> = spots
            .iter()
            .map(|&(n, e, v)| Reading::new(center.offset_km(n, e), v))
            .collect();
        readings.dedup_by(|a, b| haversine_km(a.location, b.location) == 0.0);
        let at = center.offset_km(probe.0, probe.1);
        let Ok(v) = idw_at(at, &readings, power) else {
            return Ok(());
        };
        let lo = readings.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
        let hi = readings.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        let mut reversed = readings.clone();
        reversed.reverse();
        let w = idw_at(at, &reversed, power).unwrap();
        prop_assert!((v - w).abs() <= 1e-9 * (1.0 + v.abs()));
    }

    /// Slowing traffic down never clears a flag.
    #[test]
    fn hotspot_flags_are_monotone_in_speed(
        speeds in proptest::collection::vec(0.0..30.0f64, 1..12),
        drops in proptest::collection::vec(0.0..10.0f64, 12),
        alpha in 0.1..0.9f64,
        k in 1usize..4,
    ) {
        let seg = RoadSegment::new(
            1,
            GeoPoint::new(40.70, -74.0).unwrap(),
            GeoPoint::new(40.71, -74.0).unwrap(),
            Some(20.0),
        )
        .unwrap();
        let series = |v: &[f64]| SegmentSpeedSeries {
            segment: 1,
            window_s: 600,
            windows: v
                .iter()
                .enumerate()
                .map(|(i, &s)| SpeedWindow { start_ms: i as i64 * 600_000, mean_speed_kmh: s, samples: 5 })
                .collect(),
        };
        let slower: Vec<f64> = speeds.iter().zip(&drops).map(|(s, d)| (s - d).max(0.0)).collect();
        let params = HotspotParams { alpha, k };
        let segs = [seg];
        let before = detect_hotspots(&segs, &BTreeMap::from([(1, series(&speeds))]), params);
        let after = detect_hotspots(&segs, &BTreeMap::from([(1, series(&slower))]), params);
        prop_assert!(!before.is_flagged(1) || after.is_flagged(1));
    }

    #[test]
    fn coverage_leaves_no_close_active_pair(
        spots in proptest::collection::vec((near(GeoPoint::new(28.55, 77.2).unwrap(), 1.5), 0u8..=100), 0..10),
        sep in 0.1..1.5f64,
    ) {
        let nodes: Vec<NodeRecord> = spots
            .iter()
            .enumerate()
            .map(|(i, &(p, b))| node(format!("n{i:02}"), b, p, SessionState::Idle { since_ms: 0 }))
            .collect();
        let snap = snapshot(0, nodes);
        let params = PolicyParams { separation_km: sep, ..PolicyParams::default() };
        let table = SensorTable::default();
        let prev = SensingPolicy::default();
        let decision = SpatialCoveragePolicy
            .tick(&PolicyContext { snapshot: &snap, table: &table, params: &params, previous: &prev, now_ms: 0 })
            .unwrap();
        let policy = SensingPolicy { policy_id: 1, directives: decision.directives };
        prop_assert!(coverage_violations(&policy, &snap, sep).is_empty());
    }
}

#[test]
fn wire_rejects_oversized_frames() {
    let mut d = Deframer::with_limit(16);
    assert!(d.push(&[b'x'; 17]).is_err());
    assert!(d.carry().is_empty());
    let msg: Message = CommandMsg::Stop.into();
    assert_eq!(d.push(&wire::encode(&msg).unwrap()).unwrap().len(), 1);
}
