//! Run metrics as line-oriented text plus CSV series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::analytics::{segment_speeds, write_segments, write_trace, HotspotParams, RoadSegment, SegmentId, TraceFix};
use crate::controller::Controller;
use crate::edge::{EdgeNode, AIR_QUALITY_RECORD_BYTES, LONG_SESSION_MS};
use crate::extract::all_gps_fixes;
use crate::policy::{DispatchRecord, PolicyEngine, TickRecord};
use crate::replay::{timelines, write_timeline};
use crate::scenario::Scenario;

/// Events collected while a simulation runs.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub ticks: Vec<TickRecord>,
    pub dispatches: Vec<DispatchRecord>,
    pub deaths: Vec<(i64, String)>,
    pub revivals: Vec<(i64, String)>,
    pub rejected_frames: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NodeReport {
    pub imei: String,
    pub bytes_tx: u64,
    pub bytes_rx: u64,
    pub keepalive_bytes_tx: u64,
    pub data_bytes_tx: u64,
    pub image_bytes_tx: u64,
    pub keepalives_tx: u64,
    pub sensor_data_tx: u64,
    pub image_data_tx: u64,
    pub commands_rx: u64,
    pub samples_generated: u64,
    pub samples_delivered: u64,
    pub samples_buffered: u64,
    pub sessions: u64,
    pub long_sessions: u64,
    pub churns: u64,
    pub connects: u64,
    pub connect_failures: u64,
    /// Bytes the controller counted from this node.
    pub controller_bytes_rx: u64,
    /// Bytes counted at the transport boundary.
    pub link_bytes_tx: u64,
    /// Percent.
    pub battery_end: f64,
}

/// Sums of the per-node counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Totals {
    pub bytes_tx: u64,
    pub bytes_rx: u64,
    pub keepalive_bytes_tx: u64,
    pub data_bytes_tx: u64,
    pub image_bytes_tx: u64,
    pub keepalives_tx: u64,
    pub sensor_data_tx: u64,
    pub image_data_tx: u64,
    pub commands_rx: u64,
    pub samples_generated: u64,
    pub samples_delivered: u64,
    pub samples_buffered: u64,
    pub sessions: u64,
    pub long_sessions: u64,
}

impl Totals {
    fn of(nodes: &[NodeReport]) -> Totals {
        let mut t = Totals::default();
        for n in nodes {
            t.bytes_tx += n.bytes_tx;
            t.bytes_rx += n.bytes_rx;
            t.keepalive_bytes_tx += n.keepalive_bytes_tx;
            t.data_bytes_tx += n.data_bytes_tx;
            t.image_bytes_tx += n.image_bytes_tx;
            t.keepalives_tx += n.keepalives_tx;
            t.sensor_data_tx += n.sensor_data_tx;
            t.image_data_tx += n.image_data_tx;
            t.commands_rx += n.commands_rx;
            t.samples_generated += n.samples_generated;
            t.samples_delivered += n.samples_delivered;
            t.samples_buffered += n.samples_buffered;
            t.sessions += n.sessions;
            t.long_sessions += n.long_sessions;
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub policy: String,
    pub start_ms: i64,
    pub duration_s: f64,
    pub nodes: Vec<NodeReport>,
    pub totals: Totals,
    /// Documented per-record size per sensor.
    pub record_bytes_constant: BTreeMap<String, u32>,
    /// Mean JSON size of generated records per sensor.
    pub record_bytes_measured: BTreeMap<String, f64>,
    pub commands_emitted: BTreeMap<String, u64>,
    pub ticks: Vec<TickRecord>,
    pub tick_errors: u64,
    pub dispatches: Vec<DispatchRecord>,
    pub deaths: Vec<(i64, String)>,
    pub revivals: Vec<(i64, String)>,
    pub rejected_frames: u64,
    pub quarantined: u64,
    pub segments: Vec<RoadSegment>,
    /// Flag after each window, from everything the controller stored.
    pub hotspot_timeline: BTreeMap<SegmentId, Vec<(i64, bool)>>,
    pub gps_trace: Vec<TraceFix>,
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

impl MetricsReport {
    pub fn build(
        scenario: &Scenario,
        controller: &Controller,
        engine: &PolicyEngine,
        edges: &[(&EdgeNode, u64)],
        log: &RunLog,
        now_ms: i64,
    ) -> MetricsReport {
        let traffic = controller.traffic();
        let mut measured: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        let nodes: Vec<NodeReport> = edges
            .iter()
            .map(|(edge, link_bytes)| {
                let c = edge.counters();
                for (sensor, (n, bytes)) in &c.record_bytes {
                    let e = measured.entry(sensor.clone()).or_default();
                    e.0 += n;
                    e.1 += bytes;
                }
                let t = traffic.get(edge.imei()).cloned().unwrap_or_default();
                let open_long = edge.open_session_ms(now_ms).is_some_and(|d| d > LONG_SESSION_MS);
                NodeReport {
                    imei: edge.imei().to_string(),
                    bytes_tx: c.bytes_tx,
                    bytes_rx: c.bytes_rx,
                    keepalive_bytes_tx: c.keepalive_bytes_tx,
                    data_bytes_tx: c.data_bytes_tx,
                    image_bytes_tx: c.image_bytes_tx,
                    keepalives_tx: c.keepalives_tx,
                    sensor_data_tx: c.sensor_data_tx,
                    image_data_tx: c.image_data_tx,
                    commands_rx: c.commands_rx.values().sum(),
                    samples_generated: c.samples_generated,
                    samples_delivered: t.records_rx,
                    samples_buffered: edge.buffered_samples(),
                    sessions: c.sessions,
                    long_sessions: c.long_sessions + u64::from(open_long),
                    churns: c.churns,
                    connects: c.connects,
                    connect_failures: c.connect_failures,
                    controller_bytes_rx: t.bytes_rx,
                    link_bytes_tx: *link_bytes,
                    battery_end: (edge.battery().level() * 1e4).round() / 1e4,
                }
            })
            .collect();

        let mut record_bytes_constant: BTreeMap<String, u32> = scenario
            .table
            .iter()
            .filter(|s| measured.contains_key(&s.name))
            .map(|s| (s.name.clone(), s.bytes_per_sample))
            .collect();
        record_bytes_constant
            .entry(crate::command::AIR_QUALITY.to_string())
            .or_insert(AIR_QUALITY_RECORD_BYTES);

        let stored = controller.stored();
        let gps_trace = all_gps_fixes(&stored);
        let params = &scenario.policy.params;
        let hotspot_timeline = if scenario.segments.is_empty() {
            BTreeMap::new()
        } else {
            segment_speeds(&gps_trace, &scenario.segments, params.window_s, params.snap_radius_km)
                .map(|series| {
                    timelines(
                        &scenario.segments,
                        &series,
                        HotspotParams {
                            alpha: params.alpha,
                            k: params.k,
                        },
                    )
                })
                .unwrap_or_default()
        };

        MetricsReport {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            policy: engine.policy_name().to_string(),
            start_ms: scenario.start_ms,
            duration_s: scenario.duration_ms as f64 / 1000.0,
            totals: Totals::of(&nodes),
            nodes,
            record_bytes_constant,
            record_bytes_measured: measured
                .into_iter()
                .filter(|(_, (n, _))| *n > 0)
                .map(|(k, (n, b))| (k, b as f64 / n as f64))
                .collect(),
            commands_emitted: engine
                .commands_sent()
                .iter()
                .map(|(k, v)| (k.as_str().to_string(), *v))
                .collect(),
            ticks: log.ticks.clone(),
            tick_errors: engine.tick_errors(),
            dispatches: log.dispatches.clone(),
            deaths: log.deaths.clone(),
            revivals: log.revivals.clone(),
            rejected_frames: log.rejected_frames,
            quarantined: controller.quarantined(),
            segments: scenario.segments.clone(),
            hotspot_timeline,
            gps_trace,
        }
    }

    /// Most nodes active at any tick.
    pub fn max_active(&self) -> usize {
        self.ticks.iter().map(|t| t.active.len()).max().unwrap_or(0)
    }

    fn rel(&self, t_ms: i64) -> f64 {
        (t_ms - self.start_ms) as f64 / 1000.0
    }

    /// `key = value` lines in a fixed order.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("scenario", self.scenario.clone());
        kv("seed", self.seed.to_string());
        kv("policy", self.policy.clone());
        kv("start_ms", self.start_ms.to_string());
        kv("duration_s", self.duration_s.to_string());
        kv("nodes", self.nodes.len().to_string());
        for (k, v) in &self.record_bytes_constant {
            kv(&format!("record_bytes.{k}.constant"), v.to_string());
        }
        for (k, v) in &self.record_bytes_measured {
            kv(&format!("record_bytes.{k}.measured_mean"), f(*v));
        }
        for n in &self.nodes {
            let p = format!("node.{}", n.imei);
            kv(&format!("{p}.bytes_tx"), n.bytes_tx.to_string());
            kv(&format!("{p}.bytes_rx"), n.bytes_rx.to_string());
            kv(&format!("{p}.keepalive_bytes_tx"), n.keepalive_bytes_tx.to_string());
            kv(&format!("{p}.data_bytes_tx"), n.data_bytes_tx.to_string());
            kv(&format!("{p}.image_bytes_tx"), n.image_bytes_tx.to_string());
            kv(&format!("{p}.messages.keepalive"), n.keepalives_tx.to_string());
            kv(&format!("{p}.messages.sensor_data"), n.sensor_data_tx.to_string());
            kv(&format!("{p}.messages.image_data"), n.image_data_tx.to_string());
            kv(&format!("{p}.messages.commands_rx"), n.commands_rx.to_string());
            kv(&format!("{p}.samples.generated"), n.samples_generated.to_string());
            kv(&format!("{p}.samples.delivered"), n.samples_delivered.to_string());
            kv(&format!("{p}.samples.buffered"), n.samples_buffered.to_string());
            kv(&format!("{p}.sessions"), n.sessions.to_string());
            kv(&format!("{p}.long_sessions"), n.long_sessions.to_string());
            kv(&format!("{p}.churns"), n.churns.to_string());
            kv(&format!("{p}.connects"), n.connects.to_string());
            kv(&format!("{p}.connect_failures"), n.connect_failures.to_string());
            kv(&format!("{p}.controller_bytes_rx"), n.controller_bytes_rx.to_string());
            kv(&format!("{p}.link_bytes_tx"), n.link_bytes_tx.to_string());
            kv(&format!("{p}.battery_end"), f(n.battery_end));
        }
        let t = &self.totals;
        kv("totals.bytes_tx", t.bytes_tx.to_string());
        kv("totals.bytes_rx", t.bytes_rx.to_string());
        kv("totals.keepalive_bytes_tx", t.keepalive_bytes_tx.to_string());
        kv("totals.data_bytes_tx", t.data_bytes_tx.to_string());
        kv("totals.image_bytes_tx", t.image_bytes_tx.to_string());
        kv("totals.messages.keepalive", t.keepalives_tx.to_string());
        kv("totals.messages.sensor_data", t.sensor_data_tx.to_string());
        kv("totals.messages.image_data", t.image_data_tx.to_string());
        kv("totals.messages.commands_rx", t.commands_rx.to_string());
        kv("totals.samples.generated", t.samples_generated.to_string());
        kv("totals.samples.delivered", t.samples_delivered.to_string());
        kv("totals.samples.buffered", t.samples_buffered.to_string());
        kv("totals.sessions", t.sessions.to_string());
        kv("totals.long_sessions", t.long_sessions.to_string());
        for (k, v) in &self.commands_emitted {
            kv(&format!("policy.commands.{k}"), v.to_string());
        }
        kv("policy.ticks", self.ticks.len().to_string());
        kv("policy.tick_errors", self.tick_errors.to_string());
        kv("policy.max_active", self.max_active().to_string());
        if let Some(last) = self.ticks.last() {
            kv("policy.final_active", last.active.join(";"));
            if let Some(h) = &last.hotspots {
                let flagged: Vec<String> = h
                    .flags
                    .iter()
                    .filter(|f| f.flagged)
                    .map(|f| f.segment.to_string())
                    .collect();
                kv("policy.final_hotspots", flagged.join(";"));
            }
        }
        let rmse: Vec<f64> = self.ticks.iter().filter_map(|t| t.loocv_rmse).collect();
        if !rmse.is_empty() {
            kv("coverage.loocv_rmse.mean", f(rmse.iter().sum::<f64>() / rmse.len() as f64));
        }
        kv("liveness.deaths", self.deaths.len().to_string());
        kv("liveness.revivals", self.revivals.len().to_string());
        kv("controller.rejected_frames", self.rejected_frames.to_string());
        kv("controller.quarantined", self.quarantined.to_string());
        s
    }

    /// Writes `report.txt` and the CSV series into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.render_text())?;

        let mut w = csv::Writer::from_path(dir.join("nodes.csv"))?;
        for n in &self.nodes {
            w.serialize(n)?;
        }
        w.flush()?;

        let mut s = String::from("t_s,policy_id,active_count,active,commands_compiled,error\n");
        for t in &self.ticks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.rel(t.at_ms),
                t.policy_id,
                t.active.len(),
                t.active.join(";"),
                t.commands_compiled,
                t.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        fs::write(dir.join("active_nodes.csv"), s)?;

        let mut s = String::from("t_s,loocv_rmse\n");
        for t in &self.ticks {
            if let Some(r) = t.loocv_rmse {
                let _ = writeln!(s, "{},{}", self.rel(t.at_ms), f(r));
            }
        }
        fs::write(dir.join("coverage_rmse.csv"), s)?;

        let mut s = String::from("t_s,segment,flagged\n");
        for t in &self.ticks {
            for fl in t.hotspots.iter().flat_map(|h| &h.flags) {
                let _ = writeln!(s, "{},{},{}", self.rel(t.at_ms), fl.segment, fl.flagged);
            }
        }
        fs::write(dir.join("hotspot_flags.csv"), s)?;

        let mut s = String::from("t_s,imei,command\n");
        for d in &self.dispatches {
            let _ = writeln!(s, "{},{},{}", self.rel(d.at_ms), d.imei, d.command.kind().as_str());
        }
        fs::write(dir.join("commands.csv"), s)?;

        let mut s = String::from("t_s,imei,event\n");
        let mut events: Vec<(i64, &str, &str)> = self
            .deaths
            .iter()
            .map(|(t, i)| (*t, i.as_str(), "dead"))
            .chain(self.revivals.iter().map(|(t, i)| (*t, i.as_str(), "revived")))
            .collect();
        events.sort();
        for (t, imei, ev) in events {
            let _ = writeln!(s, "{},{imei},{ev}", self.rel(t));
        }
        fs::write(dir.join("liveness.csv"), s)?;

        if !self.segments.is_empty() {
            write_segments(fs::File::create(dir.join("segments.csv"))?, &self.segments)?;
            write_timeline(&dir.join("hotspot_timeline.csv"), &self.hotspot_timeline)?;
        }
        if !self.gps_trace.is_empty() {
            write_trace(fs::File::create(dir.join("gps_trace.csv"))?, &self.gps_trace)?;
        }
        Ok(())
    }
}
