//! Bodies of the controller's HTTP API, shared by the service and its client.
//!
//! Commands are posted as wire command objects, e.g. `{"messageType":"STOP"}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analytics::HotspotFlags;
use crate::command::SensingPolicy;
use crate::controller::{NodeRecord, NodeTraffic, SessionState};
use crate::policy::TickRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub now_ms: i64,
    pub nodes: usize,
    pub alive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub node: NodeRecord,
    pub traffic: NodeTraffic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyView {
    pub name: String,
    pub tick_period_ms: i64,
    pub in_force: SensingPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickView {
    pub at_ms: i64,
    pub policy_id: u64,
    pub active: Vec<String>,
    pub commands_compiled: usize,
    pub hotspots: Option<HotspotFlags>,
    pub loocv_rmse: Option<f64>,
    pub error: Option<String>,
}

impl From<&TickRecord> for TickView {
    fn from(t: &TickRecord) -> Self {
        TickView {
            at_ms: t.at_ms,
            policy_id: t.policy_id,
            active: t.active.clone(),
            commands_compiled: t.commands_compiled,
            hotspots: t.hotspots.clone(),
            loocv_rmse: t.loocv_rmse,
            error: t.error.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub nodes: usize,
    pub alive: usize,
    pub bytes_rx: u64,
    pub bytes_tx: u64,
    pub records_rx: u64,
    pub commands_sent: BTreeMap<String, u64>,
    pub ticks: u64,
    pub tick_errors: u64,
    pub quarantined: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResponse {
    pub imei: String,
    pub command: String,
    pub session: SessionState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}
