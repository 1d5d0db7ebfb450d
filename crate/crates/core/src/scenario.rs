//! Scenario files: fleet, environment, policy and run length in TOML.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::analytics::{read_segments, read_trace, GeoPoint, RoadSegment};
use crate::command::{SensorSpec, SensorTable, AIR_QUALITY, GPS};
use crate::controller::ControllerConfig;
use crate::edge::{AirQualityField, BatteryModel, EdgeNodeConfig, Environment, Mobility, Waveform};
use crate::policy::{EngineConfig, PolicyParams, PolicyRegistry, PolicySetup};
use crate::command::CycleTiming;

/// Sim start used when a scenario gives none; aligned to a 10-minute boundary.
pub const DEFAULT_START_MS: i64 = 1_699_999_800_000;

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("aq-day", include_str!("../../../scenarios/aq-day.toml")),
    ("cleanliness", include_str!("../../../scenarios/cleanliness.toml")),
    ("default-cycle", include_str!("../../../scenarios/default-cycle.toml")),
    ("delhi5", include_str!("../../../scenarios/delhi5.toml")),
    ("liveness", include_str!("../../../scenarios/liveness.toml")),
    ("nyc-hotspot", include_str!("../../../scenarios/nyc-hotspot.toml")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{origin}: line {line}, column {column}: {message}")]
    Syntax {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{origin}: {}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid {
        origin: String,
        line: Option<usize>,
        message: String,
    },
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("no scenario file or bundled scenario named `{0}`")]
    NotFound(String),
}

impl ScenarioError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ScenarioError::Syntax { line, .. } => Some(*line),
            ScenarioError::Invalid { line, .. } => *line,
            _ => None,
        }
    }
}

fn default_step_ms() -> i64 {
    1000
}

fn default_start_ms() -> i64 {
    DEFAULT_START_MS
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    seed: u64,
    duration_s: f64,
    #[serde(default = "default_step_ms")]
    step_ms: i64,
    #[serde(default = "default_start_ms")]
    start_epoch_ms: i64,
    acceleration: Option<f64>,
    #[serde(default)]
    controller: ControllerSection,
    #[serde(default)]
    policy: PolicySection,
    #[serde(default)]
    sensors: BTreeMap<String, SensorOverride>,
    #[serde(default)]
    air_quality: AirQualityField,
    #[serde(default)]
    accelerometer: Waveform,
    #[serde(default)]
    segments: Vec<SegmentEntry>,
    segments_file: Option<PathBuf>,
    #[serde(default)]
    defaults: NodeDefaults,
    #[serde(default)]
    nodes: Vec<NodeEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ControllerSection {
    keepalive_period_s: f64,
    liveness_timeout_s: f64,
    snapshot_horizon_s: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            keepalive_period_s: 10.0,
            liveness_timeout_s: 30.0,
            snapshot_horizon_s: 3600.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PolicySection {
    name: String,
    tick_s: f64,
    sense_s: f64,
    break_s: f64,
    params: PolicyParams,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            name: "default".into(),
            tick_s: 5.0,
            sense_s: 20.0,
            break_s: 10.0,
            params: PolicyParams::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorOverride {
    max_frequency: f64,
    default_frequency: f64,
    bytes_per_sample: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentEntry {
    id: u64,
    start: [f64; 2],
    end: [f64; 2],
    free_flow_kmh: Option<f64>,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatteryEntry {
    start: Option<f64>,
    base_drain_per_hour: Option<f64>,
    per_sample: Option<f64>,
    per_kib_tx: Option<f64>,
}

impl BatteryEntry {
    fn over(self, base: BatteryModel) -> BatteryModel {
        BatteryModel {
            start: self.start.unwrap_or(base.start),
            base_drain_per_hour: self.base_drain_per_hour.unwrap_or(base.base_drain_per_hour),
            per_sample: self.per_sample.unwrap_or(base.per_sample),
            per_kib_tx: self.per_kib_tx.unwrap_or(base.per_kib_tx),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDefaults {
    sensors: Option<Vec<String>>,
    #[serde(default)]
    battery: BatteryEntry,
    keepalive_period_s: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteEntry {
    path: Vec<[f64; 2]>,
    /// `[t_s, km/h]` pairs.
    speeds: Vec<[f64; 2]>,
    #[serde(default)]
    shuttle: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    imei: String,
    sensors: Option<Vec<String>>,
    #[serde(default)]
    battery: BatteryEntry,
    keepalive_period_s: Option<f64>,
    position: Option<[f64; 2]>,
    /// `[t_s, latitude, longitude]` triples.
    waypoints: Option<Vec<[f64; 3]>>,
    route: Option<RouteEntry>,
    trace_file: Option<PathBuf>,
    #[serde(default)]
    churn_at_s: Vec<f64>,
    #[serde(default)]
    outages: Vec<[f64; 2]>,
    #[serde(default)]
    keepalive_outages: Vec<[f64; 2]>,
    #[serde(default)]
    dirt: Vec<[f64; 2]>,
}

/// One node as the simulator runs it.
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub edge: EdgeNodeConfig,
    /// Address changes, as offsets from the scenario start.
    pub churn_at_ms: Vec<i64>,
    /// `[from, to)` offsets during which the controller is unreachable.
    pub outages: Vec<(i64, i64)>,
}

#[derive(Debug, Clone)]
pub struct PolicySpec {
    pub name: String,
    pub params: PolicyParams,
    pub engine: EngineConfig,
}

/// A validated scenario with every default resolved.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub seed: u64,
    pub duration_ms: i64,
    pub step_ms: i64,
    pub start_ms: i64,
    pub acceleration: Option<f64>,
    pub controller: ControllerConfig,
    pub policy: PolicySpec,
    pub table: SensorTable,
    pub env: Environment,
    pub segments: Vec<RoadSegment>,
    pub nodes: Vec<NodeSpec>,
}

fn ms(s: f64) -> i64 {
    (s * 1000.0).round() as i64
}

/// 1-based line of the first occurrence of `needle`, if any.
fn line_of(src: &str, needle: &str) -> Option<usize> {
    src.find(needle).map(|at| src[..at].lines().count().max(1) + usize::from(src[..at].ends_with('\n')))
}

fn point(p: [f64; 2]) -> Result<GeoPoint, String> {
    GeoPoint::new(p[0], p[1]).map_err(|e| e.to_string())
}

struct Ctx<'a> {
    src: &'a str,
    origin: &'a str,
}

impl Ctx<'_> {
    fn invalid(&self, near: Option<&str>, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Invalid {
            origin: self.origin.to_string(),
            line: near.and_then(|n| line_of(self.src, n)),
            message: message.into(),
        }
    }
}

impl Scenario {
    /// Parses and validates scenario TOML. Relative file references resolve
    /// against `base_dir`.
    pub fn from_toml_str(src: &str, origin: &str, base_dir: Option<&Path>) -> Result<Scenario, ScenarioError> {
        let file: File = toml::from_str(src).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| {
                    let before = &src[..s.start.min(src.len())];
                    let line = before.matches('\n').count() + 1;
                    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    (line, column)
                })
                .unwrap_or((0, 0));
            ScenarioError::Syntax {
                origin: origin.to_string(),
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        let ctx = Ctx { src, origin };
        build(file, &ctx, base_dir)
    }

    /// Reads `path`, or falls back to the bundled scenario of that name.
    pub fn load(path_or_name: &str) -> Result<Scenario, ScenarioError> {
        let path = Path::new(path_or_name);
        if path.is_file() {
            let src = fs::read_to_string(path).map_err(|e| ScenarioError::Io(path_or_name.to_string(), e))?;
            return Scenario::from_toml_str(&src, path_or_name, path.parent());
        }
        Scenario::bundled(path_or_name)
    }

    pub fn bundled(name: &str) -> Result<Scenario, ScenarioError> {
        let (_, src) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ScenarioError::NotFound(name.to_string()))?;
        Scenario::from_toml_str(src, name, None)
    }

    pub fn bundled_source(name: &str) -> Option<&'static str> {
        BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
    }

    pub fn end_ms(&self) -> i64 {
        self.start_ms + self.duration_ms
    }

    pub fn policy_setup(&self) -> PolicySetup {
        PolicySetup {
            params: self.policy.params.clone(),
            segments: self.segments.clone(),
        }
    }
}

fn build(file: File, ctx: &Ctx<'_>, base_dir: Option<&Path>) -> Result<Scenario, ScenarioError> {
    let resolve = |p: &Path| match base_dir {
        Some(d) if p.is_relative() => d.join(p),
        _ => p.to_path_buf(),
    };
    if !(file.duration_s >= 0.0 && file.duration_s.is_finite()) {
        return Err(ctx.invalid(Some("duration_s"), "duration_s must be >= 0"));
    }
    if file.step_ms <= 0 {
        return Err(ctx.invalid(Some("step_ms"), "step_ms must be > 0"));
    }
    if let Some(a) = file.acceleration {
        if !(a > 0.0 && a.is_finite()) {
            return Err(ctx.invalid(Some("acceleration"), format!("acceleration must be > 0, got {a}")));
        }
    }
    let c = &file.controller;
    if !(c.keepalive_period_s > 0.0) || !(c.liveness_timeout_s > 0.0) || !(c.snapshot_horizon_s > 0.0) {
        return Err(ctx.invalid(Some("[controller]"), "controller periods must be > 0"));
    }
    let controller = ControllerConfig {
        keepalive_period_ms: ms(c.keepalive_period_s),
        liveness_timeout_ms: ms(c.liveness_timeout_s),
        snapshot_horizon_ms: ms(c.snapshot_horizon_s),
        retention_ms: None,
        data_dir: None,
    };

    let p = &file.policy;
    if !(p.tick_s > 0.0) || !(p.sense_s > 0.0) || !(p.break_s >= 0.0) {
        return Err(ctx.invalid(Some("[policy]"), "policy needs tick_s > 0, sense_s > 0, break_s >= 0"));
    }
    let engine = EngineConfig {
        tick_period_ms: ms(p.tick_s),
        timing: CycleTiming {
            sense_ms: ms(p.sense_s),
            break_ms: ms(p.break_s),
        },
    };

    let overrides = SensorTable::from_specs(file.sensors.iter().map(|(name, o)| {
        SensorSpec::new(name, o.max_frequency, o.default_frequency, o.bytes_per_sample)
    }))
    .map_err(|e| ctx.invalid(Some("[sensors"), e.to_string()))?;
    let table = SensorTable::default().merged(&overrides);

    file.air_quality
        .validate()
        .map_err(|e| ctx.invalid(Some("[air_quality"), e))?;
    let env = Environment {
        air_quality: file.air_quality,
        accelerometer: file.accelerometer,
    };

    let mut segments = Vec::new();
    for s in &file.segments {
        let seg = point(s.start)
            .and_then(|a| Ok((a, point(s.end)?)))
            .and_then(|(a, b)| RoadSegment::new(s.id, a, b, s.free_flow_kmh).map_err(|e| e.to_string()))
            .map_err(|e| ctx.invalid(Some(&format!("id = {}", s.id)), format!("segment {}: {e}", s.id)))?;
        segments.push(seg);
    }
    if let Some(f) = &file.segments_file {
        let path = resolve(f);
        let fh = fs::File::open(&path).map_err(|e| ScenarioError::Io(path.display().to_string(), e))?;
        let more = read_segments(fh).map_err(|e| ctx.invalid(Some("segments_file"), format!("{}: {e}", path.display())))?;
        segments.extend(more);
    }
    let mut seen = BTreeSet::new();
    for s in &segments {
        if !seen.insert(s.id) {
            return Err(ctx.invalid(Some(&format!("id = {}", s.id)), format!("duplicate segment id {}", s.id)));
        }
    }

    let policy = PolicySpec {
        name: p.name.clone(),
        params: p.params.clone(),
        engine,
    };
    let registry = PolicyRegistry::default();
    if !registry.contains(&policy.name) {
        let known: Vec<&str> = registry.names().collect();
        return Err(ctx.invalid(
            Some("[policy]"),
            format!("unknown policy `{}` (known: {})", policy.name, known.join(", ")),
        ));
    }
    registry
        .build(
            &policy.name,
            &PolicySetup {
                params: policy.params.clone(),
                segments: segments.clone(),
            },
        )
        .map_err(|e| ctx.invalid(Some("[policy"), e.to_string()))?;

    let start_ms = file.start_epoch_ms;
    let default_sensors = file
        .defaults
        .sensors
        .clone()
        .unwrap_or_else(|| vec![AIR_QUALITY.to_string(), GPS.to_string()]);
    let default_battery = file.defaults.battery.over(BatteryModel::default());
    let default_keepalive = file.defaults.keepalive_period_s.unwrap_or(c.keepalive_period_s);

    let mut nodes = Vec::new();
    let mut imeis = BTreeSet::new();
    for (index, n) in file.nodes.iter().enumerate() {
        let near = format!("imei = \"{}\"", n.imei);
        let err = |m: String| ctx.invalid(Some(&near), format!("node `{}`: {m}", n.imei));
        if n.imei.is_empty() {
            return Err(ctx.invalid(Some("imei = \"\""), "node imei must not be empty"));
        }
        if !imeis.insert(n.imei.clone()) {
            return Err(err("duplicate imei".into()));
        }
        let names = n.sensors.clone().unwrap_or_else(|| default_sensors.clone());
        let mut specs = Vec::new();
        for name in &names {
            let spec = table
                .get(name)
                .ok_or_else(|| err(format!("sensor `{name}` is not in the sensor table")))?;
            specs.push(spec.clone());
        }
        let sources = [n.position.is_some(), n.waypoints.is_some(), n.route.is_some(), n.trace_file.is_some()];
        if sources.iter().filter(|s| **s).count() != 1 {
            return Err(err("give exactly one of position, waypoints, route, trace_file".into()));
        }
        let mobility = if let Some(p) = n.position {
            Mobility::fixed(point(p).map_err(err)?)
        } else if let Some(w) = &n.waypoints {
            let pts = w
                .iter()
                .map(|w| Ok((ms(w[0]), point([w[1], w[2]])?)))
                .collect::<Result<Vec<_>, String>>()
                .map_err(err)?;
            Mobility::Waypoints(pts)
        } else if let Some(r) = &n.route {
            Mobility::Route {
                path: r.path.iter().map(|p| point(*p)).collect::<Result<_, _>>().map_err(err)?,
                speeds: r.speeds.iter().map(|s| (ms(s[0]), s[1])).collect(),
                shuttle: r.shuttle,
            }
        } else {
            let path = resolve(n.trace_file.as_deref().unwrap_or(Path::new("")));
            let fh = fs::File::open(&path).map_err(|e| ScenarioError::Io(path.display().to_string(), e))?;
            let fixes = read_trace(fh).map_err(|e| err(format!("{}: {e}", path.display())))?;
            Mobility::from_trace(&fixes, &n.imei, start_ms).map_err(err)?
        };
        let windows = |v: &[[f64; 2]], what: &str| -> Result<Vec<(i64, i64)>, ScenarioError> {
            v.iter()
                .map(|w| {
                    if w[1] > w[0] {
                        Ok((ms(w[0]), ms(w[1])))
                    } else {
                        Err(err(format!("{what} window [{}, {}] is empty", w[0], w[1])))
                    }
                })
                .collect()
        };
        if n.dirt.iter().any(|d| !(0.0..=1.0).contains(&d[1])) {
            return Err(err("dirt levels must lie in [0, 1]".into()));
        }
        let mut churn_at_ms: Vec<i64> = n.churn_at_s.iter().map(|s| ms(*s)).collect();
        churn_at_ms.sort_unstable();
        let mut dirt: Vec<(i64, f64)> = n.dirt.iter().map(|d| (ms(d[0]), d[1])).collect();
        dirt.sort_by_key(|d| d.0);
        let edge = EdgeNodeConfig {
            imei: n.imei.clone(),
            index: index as u32,
            sensors: specs,
            mobility,
            battery: n.battery.over(default_battery),
            keepalive_period_ms: ms(n.keepalive_period_s.unwrap_or(default_keepalive)),
            keepalive_outages: windows(&n.keepalive_outages, "keepalive_outages")?,
            dirt,
            start_ms,
        };
        edge.validate().map_err(err)?;
        nodes.push(NodeSpec {
            edge,
            churn_at_ms,
            outages: windows(&n.outages, "outages")?,
        });
    }

    Ok(Scenario {
        name: file.name,
        description: file.description,
        seed: file.seed,
        duration_ms: ms(file.duration_s),
        step_ms: file.step_ms,
        start_ms,
        acceleration: file.acceleration,
        controller,
        policy,
        table,
        env,
        segments,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for (name, _) in BUNDLED {
            let s = Scenario::bundled(name).unwrap_or_else(|e| panic!("{e}"));
            assert_eq!(&s.name, name);
        }
    }

    #[test]
    fn syntax_error_has_line_number() {
        let src = "name = \"x\"\nduration_s = 10\n[policy]\nname = \n";
        let e = Scenario::from_toml_str(src, "t.toml", None).unwrap_err();
        assert_eq!(e.line(), Some(4), "{e}");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let src = "name = \"x\"\nduration_s = 10\n\n[[nodes]]\nimei = \"a\"\nposition = [1.0, 2.0]\nspeed = 3\n";
        let e = Scenario::from_toml_str(src, "t.toml", None).unwrap_err();
        assert_eq!(e.line(), Some(7), "{e}");
    }

    #[test]
    fn duplicate_imei_points_at_node() {
        let src = "name = \"x\"\nduration_s = 10\n[[nodes]]\nimei = \"a\"\nposition = [1.0, 2.0]\n[[nodes]]\nimei = \"a\"\nposition = [1.0, 2.0]\n";
        let e = Scenario::from_toml_str(src, "t.toml", None).unwrap_err();
        assert!(e.to_string().contains("duplicate imei"), "{e}");
        assert_eq!(e.line(), Some(4));
    }

    #[test]
    fn semantic_errors() {
        let cases = [
            ("name = \"x\"\nduration_s = 10\nacceleration = 0\n", "acceleration"),
            ("name = \"x\"\nduration_s = 10\n[policy]\nname = \"nope\"\n", "unknown policy"),
            ("name = \"x\"\nduration_s = 10\n[policy]\nname = \"hotspot\"\n", "segment table"),
            (
                "name = \"x\"\nduration_s = 10\n[[nodes]]\nimei = \"a\"\nsensors = [\"Sonar\"]\nposition = [1.0, 2.0]\n",
                "Sonar",
            ),
            ("name = \"x\"\nduration_s = 10\n[[nodes]]\nimei = \"a\"\n", "exactly one"),
            (
                "name = \"x\"\nduration_s = 10\n[[nodes]]\nimei = \"a\"\nposition = [1.0, 2.0]\nkeepalive_period_s = 0\n",
                "keepalive",
            ),
        ];
        for (src, want) in cases {
            let e = Scenario::from_toml_str(src, "t.toml", None).unwrap_err();
            assert!(e.to_string().contains(want), "{want}: {e}");
        }
    }

    #[test]
    fn defaults_resolve() {
        let src = "name = \"x\"\nduration_s = 60\n[defaults]\nbattery = { per_kib_tx = 0.0 }\n[[nodes]]\nimei = \"a\"\nposition = [28.5, 77.2]\nbattery = { start = 40 }\n";
        let s = Scenario::from_toml_str(src, "t.toml", None).unwrap();
        let b = s.nodes[0].edge.battery;
        assert_eq!((b.start, b.per_kib_tx, b.base_drain_per_hour), (40.0, 0.0, 0.5));
        assert_eq!(s.nodes[0].edge.sensors.len(), 2);
        assert_eq!(s.policy.engine, EngineConfig::default());
        assert_eq!(s.start_ms, DEFAULT_START_MS);
    }
}
