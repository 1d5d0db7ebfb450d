//! The programmable control layer. A [`Policy`] looks at a registry snapshot
//! and returns per-node directives; the [`PolicyEngine`] numbers them,
//! compiles them against the policy in force and drives dispatch.

mod cleanliness;
mod coverage;
mod detector;
mod hotspot;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cleanliness::CleanlinessPolicy;
pub use coverage::{coverage_violations, SpatialCoveragePolicy};
pub use detector::{DetectorError, DirtDetector, LuminanceDetector};
pub use hotspot::{hotspot_frequency, HotspotPolicy};

use crate::analytics::{HotspotFlags, RoadSegment};
use crate::command::{CommandError, CycleTiming, Directive, Scheduler, SensingPolicy, SensorTable, GPS};
use crate::controller::{Controller, ControllerError, Snapshot};
use crate::wire::{CommandMsg, CommandType};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy configuration: {0}")]
    Config(String),
    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("policy tick failed: {0}")]
    Tick(String),
    #[error(transparent)]
    Command(#[from] CommandError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyBounds {
    pub f_min: f64,
    pub f_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    pub separation_km: f64,
    /// Nodes below this battery percentage are never kept active.
    pub battery_floor: u8,
    pub alpha: f64,
    pub k: usize,
    pub lambda: f64,
    pub outlier_cutoff: f64,
    pub window_s: u32,
    pub snap_radius_km: f64,
    /// Fraction of free-flow speed under which the camera fires.
    pub camera_speed_fraction: f64,
    /// Sensor whose frequency follows traffic.
    pub hotspot_sensor: String,
    /// Stop sensing nodes on segments running at free flow.
    pub deactivate_free_flow: bool,
    pub dirt_threshold: f64,
    pub image_period_s: u32,
    /// Sensors started on a node whose camera sees dirt.
    pub aux_sensors: Vec<String>,
    pub frequency_bounds: BTreeMap<String, FrequencyBounds>,
    pub idw_power: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            separation_km: 0.5,
            battery_floor: 15,
            alpha: 0.4,
            k: 2,
            lambda: 0.3,
            outlier_cutoff: 3.0,
            window_s: 600,
            snap_radius_km: 0.05,
            camera_speed_fraction: 0.25,
            hotspot_sensor: GPS.into(),
            deactivate_free_flow: false,
            dirt_threshold: 0.3,
            image_period_s: 300,
            aux_sensors: vec!["AirQuality".into(), "Dust".into(), "Humidity".into()],
            frequency_bounds: BTreeMap::from([(
                GPS.to_string(),
                FrequencyBounds {
                    f_min: 0.1,
                    f_max: 1.0,
                },
            )]),
            idw_power: 2.0,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if !(self.separation_km > 0.0) {
            return bad(format!("separation_km must be > 0, got {}", self.separation_km));
        }
        if !(self.dirt_threshold > 0.0 && self.dirt_threshold < 1.0) {
            return bad(format!("dirt_threshold must be in (0, 1), got {}", self.dirt_threshold));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must be in (0, 1], got {}", self.lambda));
        }
        if self.battery_floor > 100 {
            return bad(format!("battery_floor must be <= 100, got {}", self.battery_floor));
        }
        if self.window_s == 0 || self.image_period_s == 0 {
            return bad("window_s and image_period_s must be > 0".into());
        }
        for (name, b) in &self.frequency_bounds {
            if !(b.f_min > 0.0 && b.f_min <= b.f_max) {
                return bad(format!(
                    "frequency_bounds.{name}: need 0 < f_min ({}) <= f_max ({})",
                    b.f_min, b.f_max
                ));
            }
        }
        Ok(())
    }

    pub fn bounds(&self, sensor: &str) -> Option<FrequencyBounds> {
        self.frequency_bounds.get(sensor).copied()
    }
}

/// Everything a policy sees at one tick.
pub struct PolicyContext<'a> {
    pub snapshot: &'a Snapshot,
    pub table: &'a SensorTable,
    pub params: &'a PolicyParams,
    /// Directives currently in force.
    pub previous: &'a SensingPolicy,
    pub now_ms: i64,
}

/// What a policy decided, plus the analytics it computed on the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decision {
    pub directives: BTreeMap<String, Directive>,
    pub hotspots: Option<HotspotFlags>,
    pub loocv_rmse: Option<f64>,
}

impl Decision {
    pub fn new(directives: BTreeMap<String, Directive>) -> Self {
        Decision {
            directives,
            ..Decision::default()
        }
    }
}

pub trait Policy: Send {
    fn name(&self) -> &str;
    fn tick(&mut self, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError>;
}

/// Every alive node senses everything it has at default frequencies.
#[derive(Debug, Clone)]
pub struct AlwaysOnPolicy {
    name: String,
}

impl AlwaysOnPolicy {
    pub fn new(name: &str) -> Self {
        AlwaysOnPolicy { name: name.into() }
    }
}

impl Policy for AlwaysOnPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn tick(&mut self, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError> {
        Ok(Decision::new(
            ctx.snapshot
                .alive()
                .map(|n| {
                    (
                        n.imei.clone(),
                        Directive::active(ctx.table.defaults_for(&n.sensors)),
                    )
                })
                .collect(),
        ))
    }
}

/// Inputs a policy factory may need beyond the parameters.
#[derive(Debug, Clone, Default)]
pub struct PolicySetup {
    pub params: PolicyParams,
    pub segments: Vec<RoadSegment>,
}

pub type PolicyFactory = Box<dyn Fn(&PolicySetup) -> Result<Box<dyn Policy>, PolicyError> + Send + Sync>;

/// Policies by name. Custom control logic plugs in through [`register`](Self::register).
pub struct PolicyRegistry {
    factories: BTreeMap<String, PolicyFactory>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        let mut r = PolicyRegistry {
            factories: BTreeMap::new(),
        };
        r.register("default", |_| Ok(Box::new(AlwaysOnPolicy::new("default"))));
        r.register("always_on", |_| Ok(Box::new(AlwaysOnPolicy::new("always_on"))));
        r.register("spatial_coverage", |_| Ok(Box::new(SpatialCoveragePolicy)));
        r.register("hotspot", |setup| {
            Ok(Box::new(HotspotPolicy::new(setup.segments.clone())?))
        });
        r.register("cleanliness", |_| {
            Ok(Box::new(CleanlinessPolicy::new(Box::new(LuminanceDetector::default()))))
        });
        r
    }
}

impl PolicyRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&PolicySetup) -> Result<Box<dyn Policy>, PolicyError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build(&self, name: &str, setup: &PolicySetup) -> Result<Box<dyn Policy>, PolicyError> {
        setup.params.validate()?;
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| PolicyError::UnknownPolicy(name.to_string()))?;
        f(setup)
    }
}

/// One policy tick as seen by the metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub at_ms: i64,
    /// Id of the policy in force after the tick.
    pub policy_id: u64,
    /// Nodes the policy in force wants sensing.
    pub active: Vec<String>,
    pub commands_compiled: usize,
    pub hotspots: Option<HotspotFlags>,
    pub loocv_rmse: Option<f64>,
    pub error: Option<String>,
    /// Stored data entries per node that the tick evaluated.
    pub inputs: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub at_ms: i64,
    pub imei: String,
    pub command: CommandMsg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub tick_period_ms: i64,
    pub timing: CycleTiming,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            tick_period_ms: 5_000,
            timing: CycleTiming::default(),
        }
    }
}

/// Bound on commands sent to one node in one control pass.
const MAX_COMMANDS_PER_PASS: usize = 8;

/// Runs one policy: tick, compile, and feed commands to the controller.
pub struct PolicyEngine {
    policy: Box<dyn Policy>,
    params: PolicyParams,
    scheduler: Scheduler,
    config: EngineConfig,
    last_tick_ms: Option<i64>,
    next_id: u64,
    commands: BTreeMap<CommandType, u64>,
    errors: u64,
}

impl PolicyEngine {
    pub fn new(policy: Box<dyn Policy>, params: PolicyParams, table: SensorTable, config: EngineConfig) -> Self {
        PolicyEngine {
            policy,
            params,
            scheduler: Scheduler::new(table, config.timing),
            config,
            last_tick_ms: None,
            next_id: 1,
            commands: BTreeMap::new(),
            errors: 0,
        }
    }

    pub fn policy_name(&self) -> &str {
        self.policy.name()
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn config(&self) -> EngineConfig {
        self.config
    }

    pub fn in_force(&self) -> &SensingPolicy {
        self.scheduler.applied()
    }

    pub fn commands_sent(&self) -> &BTreeMap<CommandType, u64> {
        &self.commands
    }

    pub fn tick_errors(&self) -> u64 {
        self.errors
    }

    /// A tick is due once a full period has passed since the last one.
    /// Late ticks collapse into one.
    pub fn tick_due(&self, now_ms: i64) -> bool {
        self.last_tick_ms
            .is_none_or(|last| now_ms - last >= self.config.tick_period_ms)
    }

    /// Evaluates the policy on `snapshot` and installs the result. On error
    /// the policy in force is kept.
    pub fn tick(&mut self, snapshot: &Snapshot) -> TickRecord {
        let now_ms = snapshot.taken_at_ms;
        self.last_tick_ms = Some(now_ms);
        let ctx = PolicyContext {
            snapshot,
            table: self.scheduler.table(),
            params: &self.params,
            previous: self.scheduler.applied(),
            now_ms,
        };
        let outcome = self.policy.tick(&ctx).and_then(|decision| {
            let next = SensingPolicy {
                policy_id: self.next_id,
                directives: decision.directives.clone(),
            };
            let batch = self.scheduler.apply(next, snapshot)?;
            Ok((decision, batch))
        });
        let mut record = TickRecord {
            at_ms: now_ms,
            policy_id: self.scheduler.applied().policy_id,
            active: Vec::new(),
            commands_compiled: 0,
            hotspots: None,
            loocv_rmse: None,
            error: None,
            inputs: snapshot.recent.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        };
        match outcome {
            Ok((decision, batch)) => {
                self.next_id += 1;
                record.policy_id = self.scheduler.applied().policy_id;
                record.commands_compiled = batch.commands.len();
                record.hotspots = decision.hotspots;
                record.loocv_rmse = decision.loocv_rmse;
            }
            Err(e) => {
                self.errors += 1;
                tracing::error!(policy = self.policy.name(), error = %e, "policy tick failed; keeping previous policy");
                record.error = Some(e.to_string());
            }
        }
        record.active = self
            .scheduler
            .applied()
            .active_nodes()
            .filter(|imei| snapshot.node(imei).is_some_and(|n| n.alive))
            .map(String::from)
            .collect();
        record
    }

    /// Sends every command currently due. `after_dispatch` runs after each
    /// successful write so in-process transports can deliver the reply
    /// before the next decision for that node.
    pub fn control(
        &mut self,
        controller: &Controller,
        now_ms: i64,
        after_dispatch: &mut dyn FnMut(&str),
    ) -> Vec<DispatchRecord> {
        let mut sent = Vec::new();
        let imeis = controller.alive_nodes();
        for imei in imeis {
            for _ in 0..MAX_COMMANDS_PER_PASS {
                let Some(node) = controller.node(&imei) else {
                    break;
                };
                if !node.alive {
                    break;
                }
                let Some(pending) = self.scheduler.next_command(&node, now_ms) else {
                    break;
                };
                match controller.dispatch(&imei, &pending.cmd, now_ms) {
                    Ok(_) => {
                        self.scheduler.acknowledge(&imei, &pending);
                        *self.commands.entry(pending.cmd.kind()).or_default() += 1;
                        sent.push(DispatchRecord {
                            at_ms: now_ms,
                            imei: imei.clone(),
                            command: pending.cmd.clone(),
                        });
                        after_dispatch(&imei);
                    }
                    Err(ControllerError::InvalidTransition { source, .. }) => {
                        tracing::warn!(%imei, error = %source, "dropping command");
                        self.scheduler.acknowledge(&imei, &pending);
                    }
                    Err(e) => {
                        tracing::debug!(%imei, error = %e, "command deferred");
                        break;
                    }
                }
            }
        }
        sent
    }
}

/// Shared handle for engines driven from several tasks.
pub type SharedEngine = Arc<parking_lot::Mutex<PolicyEngine>>;
