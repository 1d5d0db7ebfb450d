//! Cloud-side control of mobile sensing fleets: wire protocol, node registry
//! and data store, policy-driven command compilation, urban analytics, and a
//! deterministic edge simulator.

pub mod analytics;
pub mod api;
pub mod command;
pub mod controller;
pub mod edge;
pub mod extract;
pub mod policy;
pub mod replay;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod wire;
