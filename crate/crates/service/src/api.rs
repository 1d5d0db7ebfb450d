use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::sync::watch;

use music_core::api::{ApiError, DispatchResponse, Health, MetricsView, NodeView, PolicyView, TickView};
use music_core::controller::ControllerError;
use music_core::wire::{self, Message};

use crate::Shared;

type AppState = Arc<Shared>;

struct Failure(StatusCode, String);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(ApiError { error: self.1 })).into_response()
    }
}

impl From<ControllerError> for Failure {
    fn from(e: ControllerError) -> Self {
        let code = match &e {
            ControllerError::NotFound(_) => StatusCode::NOT_FOUND,
            ControllerError::NodeDead(_) | ControllerError::InvalidTransition { .. } => StatusCode::CONFLICT,
            ControllerError::NotConnected(_) => StatusCode::SERVICE_UNAVAILABLE,
            ControllerError::Wire(_) | ControllerError::UnexpectedCommand => StatusCode::BAD_REQUEST,
            ControllerError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Failure(code, e.to_string())
    }
}

pub(crate) fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/nodes", get(nodes))
        .route("/nodes/{imei}", get(node))
        .route("/nodes/{imei}/commands", post(dispatch))
        .route("/policy", get(policy))
        .route("/metrics", get(metrics))
        .route("/analytics/ticks", get(ticks))
        .route("/analytics/latest", get(latest))
        .with_state(state)
}

pub(crate) async fn serve(listener: TcpListener, state: AppState, mut stop: watch::Receiver<bool>) {
    let app = router(state);
    let shutdown = async move {
        let _ = stop.changed().await;
    };
    if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
        tracing::error!(error = %e, "api server failed");
    }
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    let alive = s.controller.alive_nodes().len();
    Json(Health {
        status: "ok".into(),
        now_ms: s.now_ms(),
        nodes: s.controller.nodes().len(),
        alive,
    })
}

fn views(s: &Shared) -> Vec<NodeView> {
    let traffic = s.controller.traffic();
    s.controller
        .nodes()
        .into_iter()
        .map(|node| NodeView {
            traffic: traffic.get(&node.imei).cloned().unwrap_or_default(),
            node,
        })
        .collect()
}

async fn nodes(State(s): State<AppState>) -> Json<Vec<NodeView>> {
    Json(views(&s))
}

async fn node(State(s): State<AppState>, Path(imei): Path<String>) -> Result<Json<NodeView>, Failure> {
    let node = s
        .controller
        .node(&imei)
        .ok_or_else(|| Failure(StatusCode::NOT_FOUND, format!("unknown node `{imei}`")))?;
    let traffic = s.controller.traffic().remove(&imei).unwrap_or_default();
    Ok(Json(NodeView { node, traffic }))
}

async fn dispatch(
    State(s): State<AppState>,
    Path(imei): Path<String>,
    body: axum::body::Bytes,
) -> Result<Json<DispatchResponse>, Failure> {
    let cmd = match wire::decode(&body) {
        Ok(Message::Command(c)) => c,
        Ok(_) => return Err(Failure(StatusCode::BAD_REQUEST, "body is not a command".into())),
        Err(e) => return Err(Failure(StatusCode::BAD_REQUEST, e.to_string())),
    };
    let now = s.now_ms();
    let session = s.controller.dispatch(&imei, &cmd, now)?;
    tracing::info!(%imei, command = cmd.kind().as_str(), "operator command");
    Ok(Json(DispatchResponse {
        imei,
        command: cmd.kind().as_str().into(),
        session,
    }))
}

async fn policy(State(s): State<AppState>) -> Json<PolicyView> {
    let engine = s.engine.lock();
    Json(PolicyView {
        name: engine.policy_name().into(),
        tick_period_ms: engine.config().tick_period_ms,
        in_force: engine.in_force().clone(),
    })
}

async fn metrics(State(s): State<AppState>) -> Json<MetricsView> {
    let traffic = s.controller.traffic();
    let engine = s.engine.lock();
    Json(MetricsView {
        nodes: traffic.len(),
        alive: s.controller.alive_nodes().len(),
        bytes_rx: traffic.values().map(|t| t.bytes_rx).sum(),
        bytes_tx: traffic.values().map(|t| t.bytes_tx).sum(),
        records_rx: traffic.values().map(|t| t.records_rx).sum(),
        commands_sent: engine
            .commands_sent()
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), *v))
            .collect(),
        ticks: s.log.lock().ticks.len() as u64,
        tick_errors: engine.tick_errors(),
        quarantined: s.controller.quarantined(),
    })
}

async fn ticks(State(s): State<AppState>) -> Json<Vec<TickView>> {
    Json(s.recent_ticks().iter().map(TickView::from).collect())
}

async fn latest(State(s): State<AppState>) -> Result<Json<TickView>, Failure> {
    s.recent_ticks()
        .last()
        .map(|t| Json(TickView::from(t)))
        .ok_or_else(|| Failure(StatusCode::NOT_FOUND, "no policy tick yet".into()))
}
