use std::net::SocketAddr;
use std::sync::Arc;

use music_core::controller::read_log;
use music_core::edge::VirtualClock;
use music_core::policy::PolicyRegistry;
use music_core::scenario::Scenario;
use music_core::wire::CommandType;
use music_service::{run_fleet, start, ServiceConfig, ServiceError};

fn any_port() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn fleet_cycles_over_tcp_and_logs_survive_shutdown() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenario = Scenario::bundled("default-cycle").unwrap();
    scenario.duration_ms = 200_000;
    let clock = Arc::new(VirtualClock::free_running(scenario.start_ms, 100.0).unwrap());

    let mut cfg = ServiceConfig::new(any_port(), any_port());
    cfg.controller.data_dir = Some(dir.path().to_path_buf());
    cfg.engine = scenario.policy.engine;
    cfg.clock = clock.clone();
    let svc = start(cfg, &PolicyRegistry::default()).await.unwrap();

    let fleet = run_fleet(&scenario, svc.data_addr, svc.cmd_addr, clock).await.unwrap();
    // let the controller read what is still in flight
    tokio::time::sleep(std::time::Duration::from_millis(200)).await;
    let shared = svc.shared.clone();
    svc.shutdown().await.unwrap();

    let imei = &scenario.nodes[0].edge.imei;
    let log = shared.log.lock();
    let kinds: Vec<CommandType> = log.dispatches.iter().map(|d| d.command.kind()).collect();
    let starts = kinds.iter().filter(|k| **k == CommandType::Start).count();
    assert!(starts >= 4, "{kinds:?}");
    assert_eq!(&kinds[..3], [CommandType::Start, CommandType::Stop, CommandType::Send]);

    let edge = &fleet.edges[0];
    let traffic = shared.controller.traffic();
    let t = &traffic[imei];
    assert_eq!(edge.counters().samples_generated, t.records_rx + edge.buffered_samples());
    assert_eq!(fleet.link_bytes[imei], t.bytes_rx);

    // every line parses after shutdown
    let entries = read_log(&dir.path().join(format!("{imei}.jsonl"))).unwrap();
    assert_eq!(entries.len() as u64, t.sensor_data_rx + t.image_data_rx);
}

#[tokio::test]
async fn occupied_port_is_a_bind_error() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let cfg = ServiceConfig::new(taken.local_addr().unwrap(), any_port());
    match start(cfg, &PolicyRegistry::default()).await {
        Err(ServiceError::Bind { what: "data", .. }) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("bound an occupied port"),
    }
}

#[tokio::test]
async fn fleet_reports_unreachable_controller() {
    let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let scenario = Scenario::bundled("default-cycle").unwrap();
    let clock = Arc::new(VirtualClock::free_running(scenario.start_ms, 100.0).unwrap());
    assert!(run_fleet(&scenario, closed, closed, clock).await.is_err());
}
