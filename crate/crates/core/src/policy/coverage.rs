use std::collections::{BTreeMap, BTreeSet};

use super::{Decision, Policy, PolicyContext, PolicyError};
use crate::analytics::{haversine_km, loocv_error, Reading};
use crate::command::{Directive, SensingPolicy, AIR_QUALITY};
use crate::controller::{NodeRecord, Snapshot};
use crate::extract::latest_reading;

/// Keeps active nodes at least `separation_km` apart. Within each conflicting
/// pair the node with less battery stops; it resumes once the conflict is gone.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpatialCoveragePolicy;

/// Which nodes stay active, given the conflict rule.
fn select_active<'a>(nodes: &[&'a NodeRecord], separation_km: f64, battery_floor: u8) -> BTreeSet<&'a str> {
    let mut active: BTreeSet<&str> = nodes
        .iter()
        .filter(|n| n.battery >= battery_floor)
        .map(|n| n.imei.as_str())
        .collect();
    for (i, a) in nodes.iter().enumerate() {
        for b in &nodes[i + 1..] {
            if !(active.contains(a.imei.as_str()) && active.contains(b.imei.as_str())) {
                continue;
            }
            if haversine_km(a.location, b.location) >= separation_km {
                continue;
            }
            // nodes are in imei order, so b has the larger imei
            let loser = if a.battery < b.battery { a } else { b };
            active.remove(loser.imei.as_str());
        }
    }
    active
}

impl Policy for SpatialCoveragePolicy {
    fn name(&self) -> &str {
        "spatial_coverage"
    }

    fn tick(&mut self, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError> {
        let alive: Vec<&NodeRecord> = ctx.snapshot.alive().collect();
        let active = select_active(&alive, ctx.params.separation_km, ctx.params.battery_floor);
        let directives: BTreeMap<String, Directive> = alive
            .iter()
            .map(|n| {
                let d = if active.contains(n.imei.as_str()) {
                    Directive::active(ctx.table.defaults_for(&n.sensors))
                } else {
                    Directive::inactive()
                };
                (n.imei.clone(), d)
            })
            .collect();

        let readings: Vec<Reading> = active
            .iter()
            .filter_map(|imei| latest_reading(AIR_QUALITY, ctx.snapshot.recent.get(*imei)?))
            .collect();
        let loocv_rmse = if readings.len() >= 2 {
            loocv_error(&readings, ctx.params.idw_power).ok()
        } else {
            None
        };
        Ok(Decision {
            directives,
            hotspots: None,
            loocv_rmse,
        })
    }
}

/// Pairs of nodes both active under `policy` yet closer than `separation_km`.
pub fn coverage_violations(policy: &SensingPolicy, snapshot: &Snapshot, separation_km: f64) -> Vec<(String, String)> {
    let active: Vec<&NodeRecord> = policy
        .active_nodes()
        .filter_map(|imei| snapshot.node(imei))
        .filter(|n| n.alive)
        .collect();
    let mut out = Vec::new();
    for (i, a) in active.iter().enumerate() {
        for b in &active[i + 1..] {
            if haversine_km(a.location, b.location) < separation_km {
                out.push((a.imei.clone(), b.imei.clone()));
            }
        }
    }
    out
}
